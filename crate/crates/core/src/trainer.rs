//! Mini-batch Adam training on batch-mean cross-entropy.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{batches, SequenceDataset};
use crate::error::{Error, Result};
use crate::model::EncoderClassifier;
use crate::numcore::{ParamStore, PROB_FLOOR};
use crate::rng::{stream, streams};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Drives initialization, shuffling and dropout.
    pub seed: u64,
    /// Stop after this many epochs without a lower validation loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        // zero is allowed so a run can be checked for parameter stasis
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config(
                "early-stop patience must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Size-weighted mean of the batch losses seen during the epoch.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc`; missing validation
    /// metrics are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Invalid(format!("history CSV: {e}"));
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                opt(r.val_loss),
                opt(r.val_acc),
            ])
            .map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Invalid(format!("history CSV: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::Invalid(format!(
            "{what} is not a probability vector"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// `H(P, Q) = -sum_j p_j ln q_j`, with `q_j` clamped to `[1e-12, 1]`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} vs {} buckets", p.len(), q.len()),
        ));
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| -pj * qj.clamp(PROB_FLOOR, 1.0).ln())
        .sum())
}

/// One bias-corrected Adam update from the gradient buffers of `params`.
/// `t` is the 1-based step count.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, cfg: &TrainConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Invalid("Adam step count starts at 1".into()));
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let (b1, b2) = (T::of(b1), T::of(b2));
    let (one, lr, eps) = (T::one(), T::of(cfg.learning_rate), T::of(cfg.adam_epsilon));
    let (c1, c2) = (T::of(c1), T::of(c2));
    for p in params.iter_mut() {
        let g = p.gradient.as_slice();
        let m = p.adam_m.as_mut_slice();
        let v = p.adam_v.as_mut_slice();
        let w = p.value.as_mut_slice();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode loss and accuracy on a whole dataset.
pub fn evaluate_loss<T: Scalar>(
    model: &EncoderClassifier<T>,
    data: &SequenceDataset<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let preds = model.predict(data, batch_size)?;
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (q, &target) in preds.iter().zip(data.targets()) {
        let qj = q[target].as_f64();
        loss -= qj.clamp(PROB_FLOOR, 1.0).ln();
        hits += usize::from(argmax(q) == target);
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

fn param_norms<T: Scalar>(params: &ParamStore<T>) -> String {
    params
        .iter()
        .map(|p| format!("{}={:.4e}", p.name, p.value.frobenius_norm().as_f64()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains in place and returns the per-epoch history.
pub fn train<T: Scalar>(
    model: &mut EncoderClassifier<T>,
    train_set: &SequenceDataset<T>,
    validation: Option<&SequenceDataset<T>>,
    cfg: &TrainConfig,
) -> Result<History> {
    train_with(model, train_set, validation, cfg, |_, _| Ok(()))
}

/// [`train`] with a hook called after every epoch.
pub fn train_with<T: Scalar>(
    model: &mut EncoderClassifier<T>,
    train_set: &SequenceDataset<T>,
    validation: Option<&SequenceDataset<T>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &EncoderClassifier<T>) -> Result<()>,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mc = model.config();
    if train_set.seq_len() != mc.seq_len
        || train_set.dim() != mc.d_model
        || train_set.k() != mc.n_classes
    {
        return Err(Error::Config(format!(
            "dataset windows {}x{} with {} buckets do not fit model {}x{} with {} classes",
            train_set.seq_len(),
            train_set.dim(),
            train_set.k(),
            mc.seq_len,
            mc.d_model,
            mc.n_classes
        )));
    }
    let validation = validation.filter(|v| !v.is_empty());

    let mut dropout_rng = stream(cfg.seed, streams::DROPOUT);
    let mut history = History::default();
    let mut step = 0u64;
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let mut seen = 0usize;
        for (b, idx) in batches(train_set.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch))?
            .iter()
            .enumerate()
        {
            let x = train_set.stack_windows(idx);
            let y = train_set.stack_targets(idx);
            let out = model.loss_and_gradients(&x, &y, &mut dropout_rng)?;
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss} at epoch {}, batch {b}; parameter norms: {}",
                    epoch + 1,
                    param_norms(model.params())
                )));
            }
            loss_sum += loss * idx.len() as f64;
            for (r, &i) in idx.iter().enumerate() {
                hits += usize::from(argmax(out.probs.row(r)) == train_set.targets()[i]);
            }
            seen += idx.len();

            model.params_mut().set_gradients(&out.grads)?;
            step += 1;
            adam_step(model.params_mut(), cfg, step)?;
            if !model.params().all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameters after epoch {}, batch {b}; parameter norms: {}",
                    epoch + 1,
                    param_norms(model.params())
                )));
            }
        }

        let (val_loss, val_acc) = match validation {
            Some(v) => {
                let (l, a) = evaluate_loss(model, v, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: hits as f64 / seen as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&record, model)?;
        history.epochs.push(record);

        if let (Some(patience), Some(vl)) = (cfg.early_stop_patience, val_loss) {
            if vl < best_val {
                best_val = vl;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(history)
}
