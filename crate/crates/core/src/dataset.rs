//! Bucketing, windowing, chronological splits and batching of a scalar series.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, positional_matrix, EmbeddingConfig, PositionalMatrix};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::{stream, streams};
use crate::scalar::Scalar;

/// Observations `y_1..y_m` with optional hidden states `h_0..h_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub hidden: Option<Vec<f64>>,
}

impl TimeSeries {
    pub fn observed(values: Vec<f64>) -> Self {
        TimeSeries {
            values,
            hidden: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `k` classes `]-inf, a_1], ]a_1, a_2], ..., ]a_{k-1}, +inf[`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    boundaries: Vec<f64>,
}

impl BucketSpec {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::Invalid(
                "at least one bucket boundary required".into(),
            ));
        }
        if boundaries.iter().any(|b| !b.is_finite()) {
            return Err(Error::Invalid("bucket boundaries must be finite".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "bucket boundaries not strictly increasing: {boundaries:?}"
            )));
        }
        Ok(BucketSpec { boundaries })
    }

    /// Boundaries at the `j/k` empirical quantiles, interpolating linearly
    /// between order statistics at rank `(n-1) j / k`.
    pub fn fit(values: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Invalid(format!("need at least 2 buckets, got {k}")));
        }
        if values.len() < k {
            return Err(Error::Invalid(format!(
                "{} values cannot fill {k} buckets",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite value in bucket fit".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let distinct = 1 + sorted.windows(2).filter(|w| w[0] != w[1]).count();
        if distinct < k {
            return Err(Error::Invalid(format!(
                "{distinct} distinct values cannot fill {k} buckets"
            )));
        }
        let n = sorted.len();
        let boundaries = (1..k)
            .map(|j| {
                let rank = (n - 1) as f64 * j as f64 / k as f64;
                let lo = rank.floor() as usize;
                let frac = rank - lo as f64;
                if lo + 1 < n {
                    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
                } else {
                    sorted[lo]
                }
            })
            .collect();
        Self::new(boundaries)
    }

    pub fn k(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// 0-based class of `value`: the `j` with `a_{j-1} < value <= a_j`.
    pub fn bucket_of(&self, value: f64) -> usize {
        self.boundaries.partition_point(|&b| b < value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Classify `y_{i+l}`.
    NextValue,
    /// Classify `y_{i+l}^2`.
    NextSquare,
}

impl Target {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Target::NextValue => y,
            Target::NextSquare => y * y,
        }
    }
}

/// How windows are drawn from a single series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Windows starting every `l` steps.
    NonOverlapping,
    /// Every window start, `m - l` windows.
    Overlapping,
    /// `l` non-overlapping datasets, one per phase `0..l`.
    Phased,
    /// Resamples of the overlapping windows, drawn with replacement.
    Bootstrap { replicates: usize, seed: u64 },
}

struct Source<T: Scalar> {
    raw: Vec<f64>,
    embedded: Matrix<T>,
    positional: Option<PositionalMatrix<T>>,
}

/// Windows `[x]_i` with one-hot targets.
///
/// Windows are views into one embedded copy of the series, so subsets and
/// splits share storage.
#[derive(Clone)]
pub struct SequenceDataset<T: Scalar> {
    source: Arc<Source<T>>,
    l: usize,
    k: usize,
    starts: Vec<usize>,
    targets: Vec<usize>,
    target_scalars: Vec<f64>,
    oracle_h: Option<Vec<f64>>,
}

impl<T: Scalar> std::fmt::Debug for SequenceDataset<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SequenceDataset")
            .field("len", &self.starts.len())
            .field("l", &self.l)
            .field("d", &self.dim())
            .field("k", &self.k)
            .finish()
    }
}

impl<T: Scalar> SequenceDataset<T> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.source.embedded.cols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// 0-based index into the series of each window's first observation.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn target_scalars(&self) -> &[f64] {
        &self.target_scalars
    }

    /// Hidden state `h_{i+l-1}` aligned with each window, for synthetic data.
    pub fn oracle_h(&self) -> Option<&[f64]> {
        self.oracle_h.as_deref()
    }

    pub fn one_hot(&self, i: usize) -> Vec<T> {
        let mut v = vec![T::zero(); self.k];
        v[self.targets[i]] = T::one();
        v
    }

    /// Raw observations covered by window `i`.
    pub fn raw_window(&self, i: usize) -> &[f64] {
        let s = self.starts[i];
        &self.source.raw[s..s + self.l]
    }

    /// Embedded window `i`, shape `(l, d)`.
    pub fn window(&self, i: usize) -> Matrix<T> {
        let mut m = Matrix::zeros(self.l, self.dim());
        self.write_window(i, m.as_mut_slice());
        m
    }

    fn write_window(&self, i: usize, out: &mut [T]) {
        let d = self.dim();
        let s = self.starts[i];
        let src = &self.source.embedded.as_slice()[s * d..(s + self.l) * d];
        out.copy_from_slice(src);
        if let Some(p) = &self.source.positional {
            for (x, &v) in out.iter_mut().zip(p.p.as_slice()) {
                *x += v;
            }
        }
    }

    /// Stacks the given windows into a `(len * l, d)` matrix.
    pub fn stack_windows(&self, indices: &[usize]) -> Matrix<T> {
        let (l, d) = (self.l, self.dim());
        let mut m = Matrix::zeros(indices.len() * l, d);
        for (b, &i) in indices.iter().enumerate() {
            self.write_window(i, &mut m.as_mut_slice()[b * l * d..(b + 1) * l * d]);
        }
        m
    }

    /// One-hot targets of the given windows as a `(len, k)` matrix.
    pub fn stack_targets(&self, indices: &[usize]) -> Matrix<T> {
        let mut m = Matrix::zeros(indices.len(), self.k);
        for (b, &i) in indices.iter().enumerate() {
            m.set(b, self.targets[i], T::one());
        }
        m
    }

    /// Windows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        SequenceDataset {
            source: Arc::clone(&self.source),
            l: self.l,
            k: self.k,
            starts: indices.iter().map(|&i| self.starts[i]).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            target_scalars: indices.iter().map(|&i| self.target_scalars[i]).collect(),
            oracle_h: self
                .oracle_h
                .as_ref()
                .map(|h| indices.iter().map(|&i| h[i]).collect()),
        }
    }

    fn range(&self, from: usize, to: usize) -> Self {
        self.subset(&(from..to).collect::<Vec<_>>())
    }

    pub fn snapshot(&self) -> Vec<SnapshotRow> {
        (0..self.len())
            .map(|i| SnapshotRow {
                window_start_index: self.starts[i],
                target_scalar: self.target_scalars[i],
                target_bucket: self.targets[i],
                oracle_h: self.oracle_h.as_ref().map(|h| h[i]),
            })
            .collect()
    }
}

fn window_starts(m: usize, l: usize, first: usize, step: usize) -> Vec<usize> {
    (first..).step_by(step).take_while(|&s| s + l < m).collect()
}

/// Builds datasets of length-`l` windows predicting the next observation
/// (or its square). `Overlapping` and `NonOverlapping` return one dataset,
/// `Phased` returns `l`, `Bootstrap` returns `replicates`.
pub fn make_windows<T: Scalar>(
    series: &TimeSeries,
    l: usize,
    method: Method,
    target: Target,
    embedding: &EmbeddingConfig,
    buckets: &BucketSpec,
) -> Result<Vec<SequenceDataset<T>>> {
    embedding.validate()?;
    let m = series.len();
    if l == 0 || m <= l {
        return Err(Error::Invalid(format!(
            "series of length {m} too short for windows of length {l}"
        )));
    }
    if let Some(h) = &series.hidden {
        if h.len() != m + 1 {
            return Err(Error::Invalid(format!(
                "{} hidden states for {m} observations",
                h.len()
            )));
        }
    }
    if series.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite observation".into()));
    }
    let d = embedding.d;
    let mut embedded = Matrix::zeros(m, d);
    for (t, &y) in series.values.iter().enumerate() {
        embedded.row_mut(t).copy_from_slice(&embed(T::of(y), d));
    }
    let positional = if embedding.use_positional {
        Some(positional_matrix(l, d)?)
    } else {
        None
    };
    let source = Arc::new(Source {
        raw: series.values.clone(),
        embedded,
        positional,
    });
    let build = |starts: Vec<usize>| {
        let target_scalars: Vec<f64> = starts
            .iter()
            .map(|&s| target.apply(series.values[s + l]))
            .collect();
        SequenceDataset {
            source: Arc::clone(&source),
            l,
            k: buckets.k(),
            targets: target_scalars
                .iter()
                .map(|&v| buckets.bucket_of(v))
                .collect(),
            target_scalars,
            // window at 0-based start s ends at y_{s+l} (1-based), conditioned on h_{s+l}
            oracle_h: series
                .hidden
                .as_ref()
                .map(|h| starts.iter().map(|&s| h[s + l]).collect()),
            starts,
        }
    };
    Ok(match method {
        Method::Overlapping => vec![build(window_starts(m, l, 0, 1))],
        Method::NonOverlapping => vec![build(window_starts(m, l, 0, l))],
        Method::Phased => (0..l).map(|p| build(window_starts(m, l, p, l))).collect(),
        Method::Bootstrap { replicates, seed } => {
            let all = window_starts(m, l, 0, 1);
            let mut rng = stream(seed, streams::BOOTSTRAP);
            (0..replicates)
                .map(|_| {
                    let starts = (0..all.len())
                        .map(|_| all[rng.gen_range(0..all.len())])
                        .collect();
                    build(starts)
                })
                .collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of windows used for learning (training plus validation).
    pub train_fraction: f64,
    /// Fraction of the learning windows held out, taken from their end.
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            validation_fraction: 0.2,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// Number of learning windows (training plus validation) out of `n`.
    pub fn learning_count(&self, n: usize) -> usize {
        floor_frac(self.train_fraction, n)
    }

    /// `(train, validation, test)` sizes for `n` windows.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let learn = self.learning_count(n);
        let train = floor_frac(1.0 - self.validation_fraction, learn);
        (train, learn - train, n - learn)
    }
}

// floor(f * n), robust to representation error such as 0.8 * 80 = 63.999...
fn floor_frac(f: f64, n: usize) -> usize {
    ((f * n as f64) + 1e-9).floor() as usize
}

/// Chronological `(train, validation, test)` cut.
pub fn split<T: Scalar>(
    dataset: &SequenceDataset<T>,
    cfg: &SplitConfig,
) -> Result<(SequenceDataset<T>, SequenceDataset<T>, SequenceDataset<T>)> {
    cfg.validate()?;
    let n = dataset.len();
    let (train, val, test) = cfg.sizes(n);
    if train == 0 || test == 0 || (cfg.validation_fraction > 0.0 && val == 0) {
        return Err(Error::Invalid(format!(
            "split of {n} windows leaves an empty partition ({train}/{val}/{test})"
        )));
    }
    Ok((
        dataset.range(0, train),
        dataset.range(train, train + val),
        dataset.range(train + val, n),
    ))
}

/// Shuffled index batches over `len` training windows for one epoch; the
/// last batch may be short.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(epoch_seed, streams::SHUFFLE));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Train/validation/test datasets for the overlapping-window pipeline, with
/// buckets fit on the learning portion's targets only.
pub struct Prepared<T: Scalar> {
    pub buckets: BucketSpec,
    pub train: SequenceDataset<T>,
    pub validation: SequenceDataset<T>,
    pub test: SequenceDataset<T>,
}

pub fn prepare<T: Scalar>(
    series: &TimeSeries,
    l: usize,
    k: usize,
    target: Target,
    embedding: &EmbeddingConfig,
    split_cfg: &SplitConfig,
) -> Result<Prepared<T>> {
    split_cfg.validate()?;
    let m = series.len();
    if l == 0 || m <= l {
        return Err(Error::Invalid(format!(
            "series of length {m} too short for windows of length {l}"
        )));
    }
    let learn = split_cfg.learning_count(m - l);
    let fit_values: Vec<f64> = (0..learn)
        .map(|s| target.apply(series.values[s + l]))
        .collect();
    let buckets = BucketSpec::fit(&fit_values, k)?;
    let all = make_windows(series, l, Method::Overlapping, target, embedding, &buckets)?
        .pop()
        .expect("overlapping windows form one dataset");
    let (train, validation, test) = split(&all, split_cfg)?;
    Ok(Prepared {
        buckets,
        train,
        validation,
        test,
    })
}

/// Audit record for one window; windows themselves are recomputed from the
/// series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub window_start_index: usize,
    pub target_scalar: f64,
    pub target_bucket: usize,
    pub oracle_h: Option<f64>,
}

pub fn write_snapshot<W: Write>(rows: &[SnapshotRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Invalid(format!("snapshot CSV: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Invalid(format!("snapshot CSV: {e}")))?;
    Ok(())
}

pub fn read_snapshot<R: Read>(input: R) -> Result<Vec<SnapshotRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: "snapshot".into(),
                line: i as u64 + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}
