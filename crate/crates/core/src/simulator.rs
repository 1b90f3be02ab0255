//! Discretized Ornstein–Uhlenbeck process with observed increments.
//!
//! Hidden state `h_{n+1} = h_n + theta (mu - h_n) dt + sigma sqrt(dt) eps_{n+1}`,
//! observation `y_{n+1} = h_{n+1} - h_n`. Given `h_n`, the next observation is
//! Gaussian, which gives exact bucket probabilities for benchmarking.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BucketSpec, TimeSeries};
use crate::error::{Error, Result};
use crate::rng::{stream, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OUConfig {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub dt: f64,
    /// Initial hidden value; the initial law is a point mass here.
    pub h0: f64,
    pub seed: u64,
}

impl Default for OUConfig {
    fn default() -> Self {
        OUConfig {
            theta: 1.0,
            mu: 0.0,
            sigma: 1.0,
            dt: 1.0,
            h0: 0.0,
            seed: 0,
        }
    }
}

impl OUConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("OU {name} must be > 0, got {v}")));
            }
        }
        if !self.mu.is_finite() || !self.h0.is_finite() {
            return Err(Error::Config("OU mu and h0 must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OUTrajectory {
    /// `h_0 .. h_m`
    pub hidden: Vec<f64>,
    /// `y_1 .. y_m`
    pub observed: Vec<f64>,
}

impl OUTrajectory {
    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn to_time_series(&self) -> TimeSeries {
        TimeSeries {
            values: self.observed.clone(),
            hidden: Some(self.hidden.clone()),
        }
    }

    /// Two-column CSV `hidden,observed`, one row per step `n = 0..m`; the
    /// observation cell of row 0 is empty since `y_0` does not exist.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Invalid(format!("trajectory CSV: {e}"));
        w.write_record(["hidden", "observed"]).map_err(err)?;
        for (n, h) in self.hidden.iter().enumerate() {
            let y = if n == 0 {
                String::new()
            } else {
                self.observed[n - 1].to_string()
            };
            w.write_record([h.to_string(), y]).map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Invalid(format!("trajectory CSV: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Simulates `m` steps with standard normal shocks from the seeded generator.
pub fn simulate(config: &OUConfig, m: usize) -> Result<OUTrajectory> {
    config.validate()?;
    if m == 0 {
        return Err(Error::Invalid(
            "trajectory length must be at least 1".into(),
        ));
    }
    let mut rng = stream(config.seed, streams::SIMULATION);
    let drift = config.theta * config.dt;
    let vol = config.sigma * config.dt.sqrt();
    let mut hidden = Vec::with_capacity(m + 1);
    let mut observed = Vec::with_capacity(m);
    let mut h = config.h0;
    hidden.push(h);
    for _ in 0..m {
        let eps: f64 = StandardNormal.sample(&mut rng);
        let next = h + drift * (config.mu - h) + vol * eps;
        observed.push(next - h);
        hidden.push(next);
        h = next;
    }
    Ok(OUTrajectory { hidden, observed })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalLaw {
    pub mean: f64,
    pub std: f64,
}

impl NormalLaw {
    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf((x - self.mean) / self.std)
    }
}

/// Law of the next observation given the current hidden value.
pub fn conditional_law(h_prev: f64, config: &OUConfig) -> Result<NormalLaw> {
    config.validate()?;
    if !h_prev.is_finite() {
        return Err(Error::Invalid(format!("hidden value {h_prev}")));
    }
    Ok(NormalLaw {
        mean: config.theta * (config.mu - h_prev) * config.dt,
        std: config.sigma * config.dt.sqrt(),
    })
}

/// Standard normal CDF through the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    if z == f64::INFINITY {
        return 1.0;
    }
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Exact probability of each bucket for the next observation given `h_prev`.
pub fn target_distribution(
    h_prev: f64,
    config: &OUConfig,
    buckets: &BucketSpec,
) -> Result<Vec<f64>> {
    let law = conditional_law(h_prev, config)?;
    Ok(bucket_probabilities(&law, buckets))
}

/// Mass of a normal law on the intervals `]a_{j-1}, a_j]` of `buckets`.
pub fn bucket_probabilities(law: &NormalLaw, buckets: &BucketSpec) -> Vec<f64> {
    let mut cdfs = Vec::with_capacity(buckets.k() + 1);
    cdfs.push(0.0);
    cdfs.extend(buckets.boundaries().iter().map(|&a| law.cdf(a)));
    cdfs.push(1.0);
    cdfs.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Standard-normal septiles from an independent quantile routine.
    pub(crate) const SEPTILES: [f64; 6] = [
        -1.067_570_523_878_141_7,
        -0.565_948_821_932_863,
        -0.180_012_369_792_705_03,
        0.180_012_369_792_705_03,
        0.565_948_821_932_863,
        1.067_570_523_878_141_7,
    ];

    #[test]
    fn rejects_non_positive_parameters() {
        for cfg in [
            OUConfig {
                sigma: 0.0,
                ..Default::default()
            },
            OUConfig {
                theta: 0.0,
                ..Default::default()
            },
            OUConfig {
                dt: -1.0,
                ..Default::default()
            },
        ] {
            assert!(simulate(&cfg, 10).is_err());
        }
        assert!(simulate(&OUConfig::default(), 0).is_err());
    }

    #[test]
    fn vanishing_noise_is_pure_mean_reversion() {
        let cfg = OUConfig {
            sigma: 1e-12,
            h0: 5.0,
            ..Default::default()
        };
        let t = simulate(&cfg, 1).unwrap();
        assert!(t.hidden[1].abs() < 1e-10);
    }

    #[test]
    fn observations_are_exact_increments() {
        let t = simulate(&OUConfig::default(), 500).unwrap();
        assert_eq!(t.hidden.len(), t.observed.len() + 1);
        for n in 1..t.hidden.len() {
            assert_eq!(t.observed[n - 1], t.hidden[n] - t.hidden[n - 1]);
        }
    }

    #[test]
    fn same_seed_same_path() {
        let cfg = OUConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(simulate(&cfg, 100).unwrap(), simulate(&cfg, 100).unwrap());
        let other = OUConfig {
            seed: 43,
            ..Default::default()
        };
        assert_ne!(simulate(&cfg, 100).unwrap(), simulate(&other, 100).unwrap());
    }

    #[test]
    fn conditional_law_examples() {
        let base = OUConfig::default();
        assert_eq!(
            conditional_law(0.0, &base).unwrap(),
            NormalLaw {
                mean: 0.0,
                std: 1.0
            }
        );
        assert_eq!(
            conditional_law(2.0, &base).unwrap(),
            NormalLaw {
                mean: -2.0,
                std: 1.0
            }
        );
        let cfg = OUConfig {
            theta: 0.5,
            mu: 1.0,
            dt: 0.25,
            sigma: 2.0,
            ..Default::default()
        };
        assert_eq!(
            conditional_law(1.0, &cfg).unwrap(),
            NormalLaw {
                mean: 0.0,
                std: 1.0
            }
        );
    }

    #[test]
    fn normal_cdf_reference_values() {
        // reference values from an arbitrary-precision evaluation
        let cases = [
            (0.0, 0.5),
            (1.0, 0.841_344_746_068_542_9),
            (-1.959_963_984_540_054, 0.025),
            (-5.0, 2.866_515_718_791_939e-7),
            (3.0, 0.998_650_101_968_369_9),
        ];
        for (z, p) in cases {
            assert!((normal_cdf(z) - p).abs() < 1e-15, "z={z}");
        }
    }

    #[test]
    fn septile_buckets_are_uniform_under_their_own_law() {
        let spec = BucketSpec::new(SEPTILES.to_vec()).unwrap();
        let t = target_distribution(0.0, &OUConfig::default(), &spec).unwrap();
        for p in &t {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_hidden_value_pushes_mass_left() {
        let spec = BucketSpec::new(SEPTILES.to_vec()).unwrap();
        let t = target_distribution(100.0, &OUConfig::default(), &spec).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let t = simulate(&OUConfig::default(), 3).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "hidden,observed");
        assert!(lines[1].ends_with(','));
    }
}
