//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation eagerly: node values are computed as
//! soon as an op is added, and the tape keeps whatever each op needs for its
//! adjoint (softmax probabilities, normalized activations, dropout masks).
//! [`Graph::backward`] then walks the tape in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::matrix::{gemm, gemm_view, View};
use crate::numcore::{Matrix, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Lower clamp applied to predicted probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow {
        a: NodeId,
        bias: NodeId,
    },
    Scale(NodeId, T),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    /// Empty mask means identity (inference, or rate 0).
    Dropout {
        a: NodeId,
        mask: Vec<T>,
    },
    SoftmaxRows(NodeId),
    LayerNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_s: Vec<T>,
        inv_sigma: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        key_dim: usize,
        value_dim: usize,
        scale: T,
        probs: Vec<T>,
    },
    RowMean(NodeId),
    Reshape(NodeId),
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Matrix<T>,
        probs: Matrix<T>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    label: String,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    params: Vec<Option<Matrix<T>>>,
    inputs: Vec<(NodeId, Matrix<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to an input leaf, if the output depends on it.
    pub fn input(&self, node: NodeId) -> Option<&Matrix<T>> {
        self.inputs.iter().find(|(n, _)| *n == node).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Recorded computation. Owns the dropout generator so masks are drawn in
/// node order, which makes evaluation reproducible for a fixed seed.
pub struct Graph<T: Scalar> {
    mode: Mode,
    rng: Option<SeededRng>,
    nodes: Vec<Node<T>>,
    scope: String,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode, rng: Option<SeededRng>) -> Self {
        Graph {
            mode,
            rng,
            nodes: Vec::new(),
            scope: String::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Hands the dropout generator back, advanced past every mask drawn.
    pub fn into_rng(self) -> Option<SeededRng> {
        self.rng
    }

    /// Prefix for the labels of subsequently added nodes.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    fn next_label(&self, op: &str) -> String {
        if self.scope.is_empty() {
            format!("{op}#{}", self.nodes.len())
        } else {
            format!("{}/{op}#{}", self.scope, self.nodes.len())
        }
    }

    fn push(&mut self, label: String, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op, label });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn input(&mut self, value: Matrix<T>) -> NodeId {
        let label = self.next_label("input");
        self.push(label, value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let label = self.next_label(&store.get(id).name);
        self.push(label, store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `ta`/`tb` select transposition.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let label = self.next_label("matmul");
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                label,
                format!("inner dimensions {m}x{k} * {kb}x{n}"),
            ));
        }
        let mut out = Matrix::zeros(m, n);
        gemm(
            ta,
            tb,
            T::one(),
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            T::zero(),
            &mut out,
        );
        Ok(self.push(label, out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let label = self.next_label("transpose");
        let out = self.nodes[a.0].value.transpose();
        self.push(label, out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let label = self.next_label("add");
        let out = self.nodes[a.0]
            .value
            .add(&self.nodes[b.0].value)
            .map_err(|e| relabel(e, &label))?;
        Ok(self.push(label, out, Op::Add(a, b)))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let label = self.next_label("add_row");
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(Error::shape(
                label,
                format!("bias {:?} for {r}x{c} operand", self.shape(bias)),
            ));
        }
        let mut out = self.nodes[a.0].value.clone();
        let b = self.nodes[bias.0].value.as_slice();
        for row in 0..r {
            for (x, &bv) in out.row_mut(row).iter_mut().zip(b) {
                *x += bv;
            }
        }
        Ok(self.push(label, out, Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let label = self.next_label("scale");
        let out = self.nodes[a.0].value.scale(s);
        self.push(label, out, Op::Scale(a, s))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let label = self.next_label("mul");
        let out = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x * y)
            .map_err(|e| relabel(e, &label))?;
        Ok(self.push(label, out, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let label = self.next_label("relu");
        let out = self.nodes[a.0]
            .value
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(label, out, Op::Relu(a))
    }

    /// Inverted dropout: in training, zeroes each unit with probability
    /// `rate` and scales survivors by `1 / (1 - rate)`. Identity otherwise.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        let label = self.next_label("dropout");
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("{label}: dropout rate {rate}")));
        }
        if self.mode == Mode::Infer || rate == 0.0 {
            let out = self.nodes[a.0].value.clone();
            return Ok(self.push(
                label,
                out,
                Op::Dropout {
                    a,
                    mask: Vec::new(),
                },
            ));
        }
        let rng = self.rng.as_mut().ok_or_else(|| {
            Error::Config(format!("{label}: train mode requires a dropout generator"))
        })?;
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.nodes[a.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.nodes[a.0].value.clone();
        for (x, &m) in out.as_mut_slice().iter_mut().zip(&mask) {
            *x *= m;
        }
        Ok(self.push(label, out, Op::Dropout { a, mask }))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let label = self.next_label("softmax");
        let out = self.nodes[a.0].value.softmax_rows();
        self.push(label, out, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x - mean) / (std + eps)` with the biased
    /// variance, followed by the affine map `gamma * x + beta`.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let label = self.next_label("layer_norm");
        let (r, c) = self.shape(a);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::shape(
                label,
                format!(
                    "gamma {:?} / beta {:?} for {r}x{c} operand",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let x = &self.nodes[a.0].value;
        let g = self.nodes[gamma.0].value.as_slice();
        let b = self.nodes[beta.0].value.as_slice();
        let inv_d = T::one() / T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_s = vec![T::zero(); r];
        let mut inv_sigma = vec![T::zero(); r];
        let mut out = Matrix::zeros(r, c);
        for row in 0..r {
            let xs = x.row(row);
            let mean = xs.iter().copied().sum::<T>() * inv_d;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let sigma = var.sqrt();
            let is = T::one() / (sigma + eps);
            inv_s[row] = is;
            inv_sigma[row] = if sigma > T::zero() {
                T::one() / sigma
            } else {
                T::zero()
            };
            let xh = &mut xhat[row * c..(row + 1) * c];
            let o = out.row_mut(row);
            for j in 0..c {
                xh[j] = (xs[j] - mean) * is;
                o[j] = g[j] * xh[j] + b[j];
            }
        }
        Ok(self.push(
            label,
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_s,
                inv_sigma,
            },
        ))
    }

    /// Scaled dot-product attention for a stack of `rows / seq_len`
    /// independent sequences and `heads` heads.
    ///
    /// `q` and `k` are `(batch * seq_len, heads * key_dim)`, `v` is
    /// `(batch * seq_len, heads * value_dim)`; head `h` owns the column block
    /// `h * key_dim ..` (resp. `h * value_dim ..`). Each head computes
    /// `softmax(Q K^T / sqrt(key_dim)) V` and the head outputs are laid side
    /// by side, i.e. already concatenated.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
    ) -> Result<NodeId> {
        let label = self.next_label("attention");
        let (qr, qc) = self.shape(q);
        let (kr, kc) = self.shape(k);
        let (vr, vc) = self.shape(v);
        if heads == 0 || seq_len == 0 || qr % seq_len != 0 || qc % heads != 0 || vc % heads != 0 {
            return Err(Error::shape(
                label,
                format!("q {qr}x{qc} with {heads} heads, sequence length {seq_len}"),
            ));
        }
        if (kr, kc) != (qr, qc) || vr != qr {
            return Err(Error::shape(
                label,
                format!("q {qr}x{qc}, k {kr}x{kc}, v {vr}x{vc}"),
            ));
        }
        let batch = qr / seq_len;
        let key_dim = qc / heads;
        let value_dim = vc / heads;
        let scale = T::one() / T::from_usize(key_dim).unwrap().sqrt();
        let l = seq_len;
        let mut probs = vec![T::zero(); batch * heads * l * l];
        let mut out = Matrix::zeros(qr, vc);
        {
            let qv = self.nodes[q.0].value.as_slice();
            let kv = self.nodes[k.0].value.as_slice();
            let vv = self.nodes[v.0].value.as_slice();
            let o = out.as_mut_slice();
            for b in 0..batch {
                for h in 0..heads {
                    let pofs = (b * heads + h) * l * l;
                    let p = &mut probs[pofs..pofs + l * l];
                    let pv = View::block(l, 0, l, 0, l);
                    let qb = View::block(qc, b * l, l, h * key_dim, key_dim);
                    let kb = View::block(qc, b * l, l, h * key_dim, key_dim);
                    gemm_view(scale, qv, qb, kv, kb.t(), T::zero(), p, pv);
                    for row in p.chunks_mut(l) {
                        crate::numcore::matrix::softmax_in_place(row);
                    }
                    let vb = View::block(vc, b * l, l, h * value_dim, value_dim);
                    let ob = View::block(vc, b * l, l, h * value_dim, value_dim);
                    gemm_view(T::one(), p, pv, vv, vb, T::zero(), o, ob);
                }
            }
        }
        Ok(self.push(
            label,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                key_dim,
                value_dim,
                scale,
                probs,
            },
        ))
    }

    /// Mean over the columns of each row: `(r, c) -> (r, 1)`.
    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let label = self.next_label("row_mean");
        let x = &self.nodes[a.0].value;
        let inv = T::one() / T::from_usize(x.cols().max(1)).unwrap();
        let out = Matrix::from_fn(x.rows(), 1, |r, _| {
            x.row(r).iter().copied().sum::<T>() * inv
        });
        self.push(label, out, Op::RowMean(a))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let label = self.next_label("reshape");
        let out = self.nodes[a.0]
            .value
            .clone()
            .reshape(rows, cols)
            .map_err(|e| relabel(e, &label))?;
        Ok(self.push(label, out, Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let label = self.next_label("slice_cols");
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::shape(
                label,
                format!("columns {start}..{} of {r}x{c}", start + len),
            ));
        }
        let x = &self.nodes[a.0].value;
        let out = Matrix::from_fn(r, len, |i, j| x.get(i, start + j));
        Ok(self.push(label, out, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let label = self.next_label("concat_cols");
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::shape(
                label,
                format!(
                    "part {:?} has {} rows, expected {rows}",
                    bad,
                    self.shape(bad).0
                ),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = &self.nodes[p.0].value;
            for r in 0..rows {
                out.row_mut(r)[offset..offset + x.cols()].copy_from_slice(x.row(r));
            }
            offset += x.cols();
        }
        Ok(self.push(label, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum of all entries as a `1 x 1` matrix.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let label = self.next_label("sum");
        let out = Matrix::filled(1, 1, self.nodes[a.0].value.sum());
        self.push(label, out, Op::Sum(a))
    }

    /// Row-softmax of `logits` followed by the batch-mean cross-entropy
    /// `-(1/B) sum_i sum_j p_ij ln max(q_ij, PROB_FLOOR)` against `targets`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Matrix<T>) -> Result<NodeId> {
        let label = self.next_label("softmax_xent");
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                label,
                format!(
                    "logits {:?} vs targets {:?}",
                    self.shape(logits),
                    targets.shape()
                ),
            ));
        }
        let probs = self.nodes[logits.0].value.softmax_rows();
        let floor = T::of(PROB_FLOOR);
        let mut total = T::zero();
        for (&p, &q) in targets.as_slice().iter().zip(probs.as_slice()) {
            if p != T::zero() {
                total -= p * q.max(floor).ln();
            }
        }
        let n = T::from_usize(targets.rows().max(1)).unwrap();
        let out = Matrix::filled(1, 1, total / n);
        Ok(self.push(
            label,
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Probabilities computed by a softmax cross-entropy node.
    pub fn cross_entropy_probs(&self, id: NodeId) -> Option<&Matrix<T>> {
        match &self.nodes[id.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from `output`, seeded with `upstream` (same shape).
    pub fn backward(&self, output: NodeId, upstream: &Matrix<T>) -> Result<Gradients<T>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Invalid(format!("node {output:?} not on this tape")));
        }
        let out_node = &self.nodes[output.0];
        if out_node.value.shape() != upstream.shape() {
            return Err(Error::shape(
                out_node.label.clone(),
                format!(
                    "upstream {:?} vs output {:?}",
                    upstream.shape(),
                    out_node.value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(upstream.clone());
        let mut params: Vec<Option<Matrix<T>>> = Vec::new();
        let mut inputs = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => inputs.push((NodeId(i), g)),
                Op::Param(pid) => {
                    if params.len() <= pid.0 {
                        params.resize_with(pid.0 + 1, || None);
                    }
                    match &mut params[pid.0] {
                        Some(acc) => acc.axpy(T::one(), &g)?,
                        slot => *slot = Some(g),
                    }
                }
                &Op::MatMul { a, b, ta, tb } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = if ta {
                        // d(A^T) = G op(B)^T, so dA = op(B) G^T
                        let mut d = Matrix::zeros(av.rows(), av.cols());
                        gemm(tb, true, T::one(), bv, &g, T::zero(), &mut d);
                        d
                    } else {
                        let mut d = Matrix::zeros(av.rows(), av.cols());
                        gemm(false, !tb, T::one(), &g, bv, T::zero(), &mut d);
                        d
                    };
                    let db = if tb {
                        let mut d = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(true, ta, T::one(), &g, av, T::zero(), &mut d);
                        d
                    } else {
                        let mut d = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(!ta, false, T::one(), av, &g, T::zero(), &mut d);
                        d
                    };
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                &Op::Transpose(a) => accumulate(&mut grads, a, g.transpose())?,
                &Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone())?;
                    accumulate(&mut grads, b, g)?;
                }
                &Op::AddRow { a, bias } => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, &x) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, a, g)?;
                    accumulate(&mut grads, bias, db)?;
                }
                &Op::Scale(a, s) => accumulate(&mut grads, a, g.scale(s))?,
                &Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = g.zip_map(bv, |x, y| x * y)?;
                    let db = g.zip_map(av, |x, y| x * y)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                &Op::Relu(a) => {
                    let d = g.zip_map(
                        &node.value,
                        |x, y| if y > T::zero() { x } else { T::zero() },
                    )?;
                    accumulate(&mut grads, a, d)?;
                }
                Op::Dropout { a, mask } => {
                    let mut d = g;
                    if !mask.is_empty() {
                        for (x, &m) in d.as_mut_slice().iter_mut().zip(mask) {
                            *x *= m;
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                &Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = d.row_mut(r);
                        let dot: T = yr.iter().zip(dr.iter()).map(|(&p, &q)| p * q).sum();
                        for (x, &p) in dr.iter_mut().zip(yr) {
                            *x = p * (*x - dot);
                        }
                    }
                    accumulate(&mut grads, a, d)?;
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    xhat,
                    inv_s,
                    inv_sigma,
                } => {
                    let (r, c) = g.shape();
                    let gam = self.nodes[gamma.0].value.as_slice();
                    let inv_d = T::one() / T::from_usize(c).unwrap();
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dbeta = Matrix::zeros(1, c);
                    let mut dx = Matrix::zeros(r, c);
                    let mut gx = vec![T::zero(); c];
                    for row in 0..r {
                        let gr = g.row(row);
                        let xh = &xhat[row * c..(row + 1) * c];
                        for j in 0..c {
                            dgamma.as_mut_slice()[j] += gr[j] * xh[j];
                            dbeta.as_mut_slice()[j] += gr[j];
                            gx[j] = gr[j] * gam[j];
                        }
                        let mean_gx = gx.iter().copied().sum::<T>() * inv_d;
                        let mean_gx_xh = gx.iter().zip(xh).map(|(&u, &v)| u * v).sum::<T>() * inv_d;
                        let out = dx.row_mut(row);
                        for j in 0..c {
                            out[j] = (gx[j] - mean_gx) * inv_s[row]
                                - xh[j] * mean_gx_xh * inv_sigma[row];
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    seq_len,
                    key_dim,
                    value_dim,
                    scale,
                    probs,
                } => {
                    let (heads, l, dk, dv, scale) =
                        (*heads, *seq_len, *key_dim, *value_dim, *scale);
                    let qv = &self.nodes[q.0].value;
                    let kv = &self.nodes[k.0].value;
                    let vv = &self.nodes[v.0].value;
                    let (rows, qc) = qv.shape();
                    let vc = vv.cols();
                    let batch = rows / l;
                    let mut dq = Matrix::zeros(rows, qc);
                    let mut dkm = Matrix::zeros(rows, qc);
                    let mut dvm = Matrix::zeros(rows, vc);
                    let mut dp = vec![T::zero(); l * l];
                    let pv = View::block(l, 0, l, 0, l);
                    for b in 0..batch {
                        for h in 0..heads {
                            let pofs = (b * heads + h) * l * l;
                            let p = &probs[pofs..pofs + l * l];
                            let gb = View::block(vc, b * l, l, h * dv, dv);
                            let vb = View::block(vc, b * l, l, h * dv, dv);
                            // dP = dO V^T, dV = P^T dO
                            gemm_view(
                                T::one(),
                                g.as_slice(),
                                gb,
                                vv.as_slice(),
                                vb.t(),
                                T::zero(),
                                &mut dp,
                                pv,
                            );
                            gemm_view(
                                T::one(),
                                p,
                                pv.t(),
                                g.as_slice(),
                                gb,
                                T::zero(),
                                dvm.as_mut_slice(),
                                vb,
                            );
                            for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                                let dot: T =
                                    prow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                                for (d, &pp) in drow.iter_mut().zip(prow) {
                                    *d = pp * (*d - dot) * scale;
                                }
                            }
                            let qb = View::block(qc, b * l, l, h * dk, dk);
                            // dQ = dS K, dK = dS^T Q
                            gemm_view(
                                T::one(),
                                &dp,
                                pv,
                                kv.as_slice(),
                                qb,
                                T::zero(),
                                dq.as_mut_slice(),
                                qb,
                            );
                            gemm_view(
                                T::one(),
                                &dp,
                                pv.t(),
                                qv.as_slice(),
                                qb,
                                T::zero(),
                                dkm.as_mut_slice(),
                                qb,
                            );
                        }
                    }
                    accumulate(&mut grads, *q, dq)?;
                    accumulate(&mut grads, *k, dkm)?;
                    accumulate(&mut grads, *v, dvm)?;
                }
                &Op::RowMean(a) => {
                    let (r, c) = self.shape(a);
                    let inv = T::one() / T::from_usize(c.max(1)).unwrap();
                    let d = Matrix::from_fn(r, c, |i, _| g.get(i, 0) * inv);
                    accumulate(&mut grads, a, d)?;
                }
                &Op::Reshape(a) => {
                    let (r, c) = self.shape(a);
                    accumulate(&mut grads, a, g.reshape(r, c)?)?;
                }
                &Op::SliceCols { a, start } => {
                    let (r, c) = self.shape(a);
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, a, d)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let d = Matrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        offset += c;
                        accumulate(&mut grads, p, d)?;
                    }
                }
                &Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    accumulate(&mut grads, a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (r, c) = probs.shape();
                    let floor = T::of(PROB_FLOOR);
                    let coef = g.get(0, 0) / T::from_usize(r.max(1)).unwrap();
                    let mut d = Matrix::zeros(r, c);
                    for row in 0..r {
                        let p = targets.row(row);
                        let q = probs.row(row);
                        // entries clamped at the floor carry no gradient
                        let live: T = p
                            .iter()
                            .zip(q)
                            .filter(|(_, &qq)| qq >= floor)
                            .map(|(&pp, _)| pp)
                            .sum();
                        let out = d.row_mut(row);
                        for j in 0..c {
                            let own = if q[j] >= floor { p[j] } else { T::zero() };
                            out[j] = (q[j] * live - own) * coef;
                        }
                    }
                    accumulate(&mut grads, *logits, d)?;
                }
            }
        }
        inputs.reverse();
        Ok(Gradients { params, inputs })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, d: Matrix<T>) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.axpy(T::one(), &d),
        slot => {
            *slot = Some(d);
            Ok(())
        }
    }
}

fn relabel(e: Error, label: &str) -> Error {
    match e {
        Error::Shape { detail, .. } => Error::shape(label, detail),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn mat(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn quadratic_form_gradient() {
        let mut g = Graph::<f64>::new(Mode::Infer, None);
        let x = g.input(mat(&[vec![1.0], vec![2.0]]));
        let y = g.matmul_t(x, x, true, false).unwrap();
        assert_eq!(g.value(y).as_slice(), &[5.0]);
        let grads = g.backward(y, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(grads.input(x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_at_its_minimum_has_zero_logit_gradient() {
        let logits = mat(&[vec![0.3, -1.2, 2.0]]);
        let target = logits.softmax_rows();
        let mut g = Graph::<f64>::new(Mode::Infer, None);
        let z = g.input(logits);
        let loss = g.softmax_cross_entropy(z, target).unwrap();
        let grads = g.backward(loss, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert!(grads.input(z).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::<f64>::new(Mode::Infer, None);
        g.set_scope("block0");
        let a = g.input(Matrix::zeros(2, 3));
        let err = g.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("block0/matmul"), "{err}");
    }

    #[test]
    fn train_dropout_requires_generator() {
        let mut g = Graph::<f64>::new(Mode::Train, None);
        let a = g.input(Matrix::zeros(2, 2));
        assert!(g.dropout(a, 0.5).is_err());
        assert!(g.dropout(a, 0.0).is_ok());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut g = Graph::<f64>::new(Mode::Train, Some(seeded(3)));
        let a = g.input(Matrix::filled(50, 50, 1.0));
        let d = g.dropout(a, 0.25).unwrap();
        let v = g.value(d);
        assert!(v
            .as_slice()
            .iter()
            .all(|&x| x == 0.0 || (x - 1.0 / 0.75).abs() < 1e-15));
        let kept = v.as_slice().iter().filter(|&&x| x != 0.0).count() as f64 / 2500.0;
        assert!((kept - 0.75).abs() < 0.03);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut g = Graph::<f64>::new(Mode::Infer, None);
        let x = Matrix::from_fn(6, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let q = g.input(x.clone());
        let k = g.input(x.map(|v| v * 0.5));
        let v = g.input(x);
        let out = g.attention(q, k, v, 2, 3).unwrap();
        assert_eq!(g.value(out).shape(), (6, 4));
        if let Op::Attention { probs, .. } = &g.nodes[out.0].op {
            for row in probs.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        } else {
            unreachable!();
        }
    }
}
