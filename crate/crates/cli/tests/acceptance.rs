//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails.
//!
//! Environment:
//! - `TSFORMER_ACCEPTANCE_ONLY=C1,C6` runs a subset.
//! - `TSFORMER_ACCEPTANCE_LONG=1` enables the 241310-point run (C5).
//! - `TSFORMER_SP500_CSV=path` uses a real `date,close` file for C8/C9
//!   instead of the generated stand-in series.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;
use tsformer::dataset::{Prepared, Target};
use tsformer::embedding::{positional_matrix, rotation_operator};
use tsformer::evaluator::{categorical_accuracy, entropy_panel, oracle_targets, to_f64};
use tsformer::model::{ClassifierLoss, EncoderClassifier, ModelConfig};
use tsformer::numcore::{finite_diff_check, Matrix};
use tsformer::rng::seeded;
use tsformer_cli::{files, load_series, prepare_data, run_train, RunConfig, Source};

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Verdict {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    Verdict {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn skip(detail: &str) -> Verdict {
    Verdict {
        status: Status::Skip,
        detail: detail.to_string(),
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join(format!("tsformer-acceptance-{}", std::process::id()))
        .join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn base_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set_seed(seed);
    cfg
}

fn oracle_accuracy(
    cfg: &RunConfig,
    data: &tsformer::dataset::SequenceDataset<f64>,
    p: &Prepared<f64>,
) -> (f64, f64) {
    let t = oracle_targets(data, &cfg.simulation, &p.buckets)
        .unwrap()
        .unwrap();
    let acc = categorical_accuracy(&t, data.targets()).unwrap();
    let r = entropy_panel("oracle", &t, data.targets(), Some(&t)).unwrap();
    (acc, r.mean_htt.unwrap())
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn c1_oracle_accuracy() -> Verdict {
    // a single 4820-window test split has a sampling sd of ~0.7pt, so the
    // tolerance applies to the seed average; per-seed values are reported
    let mut parts = Vec::new();
    let (mut train_sum, mut test_sum, mut expected_sum) = (0.0, 0.0, 0.0);
    for seed in SEEDS {
        let cfg = base_config(seed);
        let p = prepare_data::<f64>(&cfg, &load_series(&cfg).unwrap()).unwrap();
        let (train, _) = oracle_accuracy(&cfg, &p.train, &p);
        let (test, _) = oracle_accuracy(&cfg, &p.test, &p);
        let t = oracle_targets(&p.test, &cfg.simulation, &p.buckets)
            .unwrap()
            .unwrap();
        let expected = t
            .iter()
            .map(|q| q.iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / t.len() as f64;
        train_sum += train;
        test_sum += test;
        expected_sum += expected;
        parts.push(format!(
            "seed {seed}: {:.2}%/{:.2}%",
            100.0 * train,
            100.0 * test
        ));
    }
    let n = SEEDS.len() as f64;
    let (train, test) = (train_sum / n, test_sum / n);
    let ok = (train - 0.3185).abs() <= 0.01 && (test - 0.3200).abs() <= 0.01;
    verdict(
        ok,
        format!(
            "mean over 5 seeds train/test {:.2}%/{:.2}% (31.85%/32.00% +-1pt), mean test max_j t_j {:.2}%; {}",
            100.0 * train,
            100.0 * test,
            100.0 * expected_sum / n,
            parts.join(", ")
        ),
    )
}

fn c2_entropy_floor() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let cfg = base_config(seed);
        let p = prepare_data::<f64>(&cfg, &load_series(&cfg).unwrap()).unwrap();
        let (_, train) = oracle_accuracy(&cfg, &p.train, &p);
        let (_, test) = oracle_accuracy(&cfg, &p.test, &p);
        ok &= (train - 1.63).abs() <= 0.02 && (test - 1.63).abs() <= 0.02;
        parts.push(format!("seed {seed}: {train:.4}/{test:.4}"));
    }
    verdict(
        ok,
        format!(
            "train/test mean H(T,T), target 1.63 +-0.02; {}",
            parts.join(", ")
        ),
    )
}

fn c3_untrained() -> Verdict {
    let cfg = base_config(0);
    let p = prepare_data::<f64>(&cfg, &load_series(&cfg).unwrap()).unwrap();
    let model = EncoderClassifier::<f64>::init(&cfg.model, cfg.train.seed).unwrap();
    let preds = to_f64(&model.predict(&p.test, 64).unwrap());
    let r = entropy_panel("test", &preds, p.test.targets(), None).unwrap();
    let ok = (r.mean_hpq - 1.9459).abs() <= 0.1 && (r.accuracy - 0.1428).abs() <= 0.02;
    verdict(
        ok,
        format!(
            "fresh model on OU test split: loss {:.4} (1.9459 +-0.1), accuracy {:.2}% (14.28% +-2pt)",
            r.mean_hpq,
            100.0 * r.accuracy
        ),
    )
}

/// Pearson correlation of predicted and oracle probabilities, per bucket.
fn bucket_correlations(rows: &[tsformer::evaluator::PointwiseRow], k: usize) -> Vec<f64> {
    (0..k)
        .map(|j| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.bucket == j)
                .map(|r| (r.q, r.t))
                .collect();
            let n = pts.len() as f64;
            let (mq, mt) = pts
                .iter()
                .fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
            let (mut sqt, mut sqq, mut stt) = (0.0, 0.0, 0.0);
            for (q, t) in &pts {
                sqt += (q - mq) * (t - mt);
                sqq += (q - mq) * (q - mq);
                stt += (t - mt) * (t - mt);
            }
            sqt / (sqq * stt).sqrt()
        })
        .collect()
}

/// Trains the base configuration on `points` simulated steps. `train_floor`
/// bounds every epoch's training loss from below.
fn synthetic_run(
    points: usize,
    seed: u64,
    name: &str,
    min_acc: f64,
    max_loss: f64,
    train_floor: Option<f64>,
) -> Verdict {
    let mut cfg = base_config(seed);
    cfg.data.points = points;
    cfg.output.dir = scratch(name);
    let out = match run_train(&cfg, false) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let test = out.evaluation.report("test").unwrap();
    let train_hist = out.history.last().unwrap();
    let min_train = out
        .history
        .epochs
        .iter()
        .map(|r| r.train_loss)
        .fold(f64::INFINITY, f64::min);

    let p = prepare_data::<f64>(&cfg, &load_series(&cfg).unwrap()).unwrap();
    let (oracle_acc, _) = oracle_accuracy(&cfg, &p.test, &p);
    let corr = bucket_correlations(
        out.evaluation.pointwise.as_deref().unwrap_or_default(),
        cfg.model.n_classes,
    );

    let ok = test.mean_hpq <= max_loss
        && test.accuracy >= min_acc
        && test.accuracy <= oracle_acc
        && train_floor.is_none_or(|f| min_train >= f);
    verdict(
        ok,
        format!(
            "test loss {:.4} (<= {max_loss}), test accuracy {:.2}% (>= {:.1}%), oracle {:.2}%; \
             final train loss {:.4} / accuracy {:.2}%, lowest epoch train loss {:.4}; \
             test H(T,Q) {:.4} vs H(T,T) {:.4}; per-bucket corr(q,t) [{}]",
            test.mean_hpq,
            100.0 * test.accuracy,
            100.0 * min_acc,
            100.0 * oracle_acc,
            train_hist.train_loss,
            100.0 * train_hist.train_acc,
            min_train,
            test.mean_htq.unwrap_or(f64::NAN),
            test.mean_htt.unwrap_or(f64::NAN),
            corr.iter()
                .map(|c| format!("{c:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn c4_table2_small() -> Verdict {
    synthetic_run(24_131, 0, "c4", 0.265, 1.75, None)
}

fn c5_table2_large() -> Verdict {
    if std::env::var_os("TSFORMER_ACCEPTANCE_LONG").is_none() {
        return skip("241310-point run not requested (TSFORMER_ACCEPTANCE_LONG=1)");
    }
    synthetic_run(241_310, 0, "c5", 0.295, 1.68, Some(1.60))
}

fn c6_positional() -> Verdict {
    let mut worst = [0.0f64; 6];
    for l in [4, 32, 128] {
        for d in [4, 16, 64] {
            let p = positional_matrix::<f64>(l, d).unwrap().p;
            let rot: Vec<Matrix<f64>> = (0..2 * l.max(d))
                .map(|k| rotation_operator(k, d).unwrap())
                .collect();
            let id = Matrix::identity(d);
            for t in rot.iter().take(d) {
                worst[0] = worst[0].max(
                    t.matmul(&t.transpose())
                        .unwrap()
                        .sub(&id)
                        .unwrap()
                        .max_abs(),
                );
                worst[0] =
                    worst[0].max(t.transpose().matmul(t).unwrap().sub(&id).unwrap().max_abs());
            }
            for k in 0..l {
                for t in 0..l {
                    let prod = rot[k].matmul(&rot[t]).unwrap();
                    worst[1] = worst[1].max(rot[k + t].sub(&prod).unwrap().max_abs());
                }
            }
            let g = p.matmul(&p.transpose()).unwrap();
            for t in 0..l {
                worst[2] = worst[2].max((g.get(t, t) - d as f64 / 2.0).abs());
                for k in 0..l - t {
                    let shifted = rot[k]
                        .matmul(&Matrix::from_vec(d, 1, p.row(t).to_vec()).unwrap())
                        .unwrap();
                    let diff = shifted
                        .as_slice()
                        .iter()
                        .zip(p.row(t + k))
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    worst[3] = worst[3].max(diff);
                    worst[4] = worst[4].max((g.get(t, t + k) - g.get(0, k)).abs());
                    worst[4] = worst[4].max(g.get(t, t + k) - d as f64 / 2.0);
                }
            }
            for i in 0..l {
                for j in 0..l {
                    worst[5] = worst[5].max((g.get(i, j) - g.get(0, i.abs_diff(j))).abs());
                }
            }
        }
    }
    let ok = worst.iter().all(|&w| w < 1e-9);
    verdict(
        ok,
        format!(
            "max residuals of properties 1-6 over l in {{4,32,128}}, d in {{4,16,64}}: [{}] (< 1e-9)",
            worst.iter().map(|w| format!("{w:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c7_gradients() -> Verdict {
    let cfg = ModelConfig {
        seq_len: 8,
        d_model: 4,
        num_heads: 2,
        head_size: 3,
        num_blocks: 1,
        ..Default::default()
    };
    let mut model = EncoderClassifier::<f64>::init(&cfg, 5).unwrap();
    // move gamma/beta/biases off their initial values so no activation sits
    // exactly on a relu kink
    let mut rng = seeded(55);
    for p in model.params_mut().iter_mut() {
        for v in p.value.as_mut_slice() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let batch = 4;
    let x = Matrix::from_fn(batch * 8, 4, |_, _| rng.gen_range(-1.5..1.5));
    let y = Matrix::from_fn(batch, 7, |r, c| f64::from(u8::from(c == (3 * r + 1) % 7)));
    let loss = ClassifierLoss {
        model: &model,
        targets: y,
    };
    match finite_diff_check(&loss, model.params(), &[x], 1e-6, 9) {
        Ok(err) => verdict(
            err < 1e-4,
            format!(
                "reduced model (l=8, d=4, 2 heads, d_k=3, 1 block, dropout masks fixed): max relative error {err:.2e} (< 1e-4)"
            ),
        ),
        Err(e) => verdict(false, format!("check failed: {e}")),
    }
}

/// Real prices from `TSFORMER_SP500_CSV` or the generated stand-in.
fn market_file() -> (PathBuf, String) {
    if let Some(p) = std::env::var_os("TSFORMER_SP500_CSV") {
        let p = PathBuf::from(p);
        return (p.clone(), format!("prices from {}", p.display()));
    }
    let path = scratch("market").join("closes.csv");
    if !path.exists() {
        common::write_closes(&common::garch_closes(24_131, 2024), &path);
    }
    (
        path,
        "24131 generated GARCH(1,1) closes (no real file given)".into(),
    )
}

fn market_config(path: &Path, task: Target, epochs: usize, name: &str) -> RunConfig {
    let mut cfg = base_config(0);
    cfg.data.source = Source::Csv;
    cfg.data.csv_path = Some(path.to_path_buf());
    cfg.data.task = task;
    cfg.train.epochs = epochs;
    cfg.output.dir = scratch(name);
    cfg
}

fn c8_squared_returns() -> Verdict {
    let (path, origin) = market_file();
    let cfg = market_config(&path, Target::NextSquare, 30, "c8");
    let n = match tsformer::market::load_prices(&path) {
        Ok(p) => p.len(),
        Err(e) => return verdict(false, format!("{origin}: {e}")),
    };
    if n < 20_000 {
        return verdict(
            false,
            format!("{origin}: {n} closes, at least 20000 required"),
        );
    }
    let out = match run_train(&cfg, false) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let test = out.evaluation.report("test").unwrap();
    let naive = test.baseline_naive.unwrap();
    let ok = test.accuracy > test.baseline_uniform && test.accuracy > naive;
    verdict(
        ok,
        format!(
            "{origin}, {} epochs: test accuracy {:.2}% vs uniform {:.2}% and naive {:.2}%; test loss {:.4}",
            cfg.train.epochs,
            100.0 * test.accuracy,
            100.0 * test.baseline_uniform,
            100.0 * naive,
            test.mean_hpq
        ),
    )
}

fn c9_return_collapse() -> Verdict {
    let (path, origin) = market_file();
    let cfg = market_config(&path, Target::NextValue, 10, "c9");
    let out = match run_train(&cfg, false) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let p = prepare_data::<f64>(&cfg, &load_series(&cfg).unwrap()).unwrap();
    let model: EncoderClassifier<f64> =
        tsformer::model::load_checkpoint(&out.out_dir.join(files::CHECKPOINT), Some(&cfg.model))
            .unwrap();
    let preds = to_f64(&model.predict(&p.test, 64).unwrap());
    let k = cfg.model.n_classes;
    let spread = (0..k)
        .map(|j| {
            let (lo, hi) = preds
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                    (lo.min(q[j]), hi.max(q[j]))
                });
            hi - lo
        })
        .fold(0.0, f64::max);
    let mean: Vec<f64> = (0..k)
        .map(|j| preds.iter().map(|q| q[j]).sum::<f64>() / preds.len() as f64)
        .collect();
    verdict(
        spread < 0.05,
        format!(
            "{origin}, 10 epochs: max per-bucket spread of test predictions {spread:.4} (< 0.05); mean prediction [{}]",
            mean.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c10_determinism() -> Verdict {
    let dir = scratch("c10");
    let config = dir.join("run.toml");
    let text = "\
[data]
points = 3000

[model]
num_blocks = 2
num_heads = 2
head_size = 8

[train]
epochs = 2
seed = 7

[simulation]
seed = 7
";
    std::fs::write(&config, text).unwrap();
    let exe = env!("CARGO_BIN_EXE_tsformer");
    let run = |name: &str| -> Result<PathBuf, String> {
        let out = dir.join(name);
        let status = Command::new(exe)
            .args(["--quiet", "train", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("{name}: exit status {status}"));
        }
        Ok(out)
    };
    let (a, b) = match (run("first"), run("second")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e),
    };
    let same = |f: &str| {
        std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok() && a.join(f).exists()
    };
    let identical: Vec<&str> = [
        files::HISTORY,
        files::CHECKPOINT,
        files::EVAL,
        files::DATASET,
    ]
    .into_iter()
    .filter(|f| same(f))
    .collect();
    verdict(
        same(files::HISTORY) && same(files::CHECKPOINT),
        format!(
            "two CLI runs of one config file; byte-identical: {}",
            identical.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<String>> = std::env::var("TSFORMER_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|c| c.trim().to_uppercase()).collect());
    let criteria: [(&str, &str, fn() -> Verdict); 10] = [
        ("C1", "oracle accuracy", c1_oracle_accuracy),
        ("C2", "entropy floor", c2_entropy_floor),
        ("C3", "untrained baseline", c3_untrained),
        ("C4", "24131-point run", c4_table2_small),
        ("C5", "241310-point run", c5_table2_large),
        ("C6", "positional encoding properties", c6_positional),
        ("C7", "gradient check", c7_gradients),
        ("C8", "squared-return task", c8_squared_returns),
        ("C9", "return-prediction collapse", c9_return_collapse),
        ("C10", "determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if let Some(o) = &only {
            if !o.iter().any(|x| x == id) {
                continue;
            }
        }
        let start = Instant::now();
        let v = run();
        let tag = match v.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!(
            "{tag} {id} {name} [{:.1}s]: {}",
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    let _ = std::fs::remove_dir_all(
        std::env::temp_dir().join(format!("tsformer-acceptance-{}", std::process::id())),
    );
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
