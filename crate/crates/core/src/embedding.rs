//! Scalar-to-vector embedding and sinusoidal positional encoding.
//!
//! A scalar `y` is lifted to `(y, y^2/2!, ..., y^d/d!)`. Attention scores
//! between two embedded observations are then the polynomial kernel
//! `K(y, y') = sum_j (y y')^j / (j!)^2`.
//!
//! The positional matrix has rows `p_t` with `p_{t,2j} = sin(t w_j)` and
//! `p_{t,2j+1} = cos(t w_j)`, `w_j = 10000^(-2j/d)`, for window offsets
//! `t = 0..l`. Shifting by `k` positions is the block rotation `T_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Model dimension, even.
    pub d: usize,
    pub use_positional: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            d: 16,
            use_positional: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        check_even(self.d)
    }
}

fn check_even(d: usize) -> Result<()> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "model dimension must be even and >= 2, got {d}"
        )));
    }
    Ok(())
}

/// `(y, y^2/2!, ..., y^d/d!)` via `c_j = c_{j-1} * y / j`.
pub fn embed<T: Scalar>(y: T, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(d);
    let mut c = T::one();
    for j in 1..=d {
        c = c * y / T::from_usize(j).unwrap();
        out.push(c);
    }
    out
}

/// Frequencies `w_j = 10000^(-2j/d)`, `j = 0..d/2`.
pub fn frequencies(d: usize) -> Vec<f64> {
    (0..d / 2)
        .map(|j| 10000f64.powf(-((2 * j) as f64) / d as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionalMatrix<T: Scalar> {
    /// `(l, d)`; row `t` is the encoding of window offset `t`.
    pub p: Matrix<T>,
    pub frequencies: Vec<f64>,
}

impl<T: Scalar> PositionalMatrix<T> {
    pub fn len(&self) -> usize {
        self.p.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.p.cols()
    }

    pub fn row(&self, t: usize) -> &[T] {
        self.p.row(t)
    }
}

pub fn positional_matrix<T: Scalar>(l: usize, d: usize) -> Result<PositionalMatrix<T>> {
    check_even(d)?;
    let w = frequencies(d);
    let p = Matrix::from_fn(l, d, |t, c| {
        let angle = t as f64 * w[c / 2];
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    });
    Ok(PositionalMatrix { p, frequencies: w })
}

/// Block-diagonal rotation `T_k` with blocks
/// `[[cos(k w_j), sin(k w_j)], [-sin(k w_j), cos(k w_j)]]`.
pub fn rotation_operator<T: Scalar>(k: usize, d: usize) -> Result<Matrix<T>> {
    check_even(d)?;
    let mut m = Matrix::zeros(d, d);
    for (j, w) in frequencies(d).into_iter().enumerate() {
        let (s, c) = (k as f64 * w).sin_cos();
        let i = 2 * j;
        m.set(i, i, T::of(c));
        m.set(i, i + 1, T::of(s));
        m.set(i + 1, i, T::of(-s));
        m.set(i + 1, i + 1, T::of(c));
    }
    Ok(m)
}

/// Embeds a window row by row, adding the positional rows when enabled.
pub fn build_sequence<T: Scalar>(
    y_window: &[f64],
    config: &EmbeddingConfig,
    positional: Option<&PositionalMatrix<T>>,
) -> Result<Matrix<T>> {
    config.validate()?;
    let l = y_window.len();
    let pos = if config.use_positional {
        let p = positional.ok_or_else(|| {
            Error::Config("positional encoding enabled but no positional matrix given".into())
        })?;
        if p.len() != l || p.dim() != config.d {
            return Err(Error::shape(
                "build_sequence",
                format!(
                    "window length {l}, dimension {} vs positional {}x{}",
                    config.d,
                    p.len(),
                    p.dim()
                ),
            ));
        }
        Some(p)
    } else {
        None
    };
    let mut out = Matrix::zeros(l, config.d);
    for (t, &y) in y_window.iter().enumerate() {
        let row = out.row_mut(t);
        row.copy_from_slice(&embed(T::of(y), config.d));
        if let Some(p) = pos {
            for (x, &v) in row.iter_mut().zip(p.row(t)) {
                *x += v;
            }
        }
    }
    Ok(out)
}
