//! Encoder-classifier: a stack of self-attention encoder blocks followed by
//! a feature-axis average and a small dense head with softmax output.
//!
//! Pre-norm block (default):
//!
//! ```text
//! u  = LN1(x)
//! r1 = x + dropout(MHA(u))
//! v  = LN2(r1)
//! y  = v + F2(dropout(relu(F1 v)))
//! ```
//!
//! Post-norm block: `v = LN1(x + dropout(MHA(x)))`, `y = LN2(v + FF(v))`.
//!
//! Attention logits are scaled by `1/sqrt(head_size)`. The feed-forward maps
//! act on each position independently with weights shared across positions.

mod checkpoint;
mod config;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, NormPlacement};

use rand::Rng;

use crate::dataset::SequenceDataset;
use crate::error::{Error, Result};
use crate::numcore::{Computation, Gradients, Graph, Matrix, Mode, NodeId, ParamId, ParamStore};
use crate::rng::{stream, streams, SeededRng};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
struct BlockParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug)]
struct HeadParams {
    dense: Vec<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderClassifier<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    blocks: Vec<BlockParams>,
    head: HeadParams,
}

impl<T: Scalar> EncoderClassifier<T> {
    /// Glorot-uniform weights (variance `2 / (fan_in + fan_out)`), zero
    /// biases and centers, unit scales. Attention projections take their
    /// fans from the per-head kernel shapes, as Keras does.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, streams::INIT);
        Ok(Self::build(config, |rows, cols, fan_in, fan_out| {
            glorot(&mut rng, rows, cols, fan_in, fan_out)
        }))
    }

    /// Same layout as [`init`](Self::init) with every weight zero.
    pub(crate) fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, |rows, cols, _, _| {
            Matrix::zeros(rows, cols)
        }))
    }

    fn build(
        config: &ModelConfig,
        mut weight: impl FnMut(usize, usize, usize, usize) -> Matrix<T>,
    ) -> Self {
        let d = config.d_model;
        let (h, dk) = (config.num_heads, config.head_size);
        let hk = h * dk;
        // fans of the per-head kernels (d, h, dk) and (h, dk, d)
        let (in_fans, out_fans) = ((h * d, dk * d), (hk, h * d));
        let mut p = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let n = |s: &str| format!("block{i}.{s}");
            blocks.push(BlockParams {
                wq: p.add(n("attn.wq"), weight(d, hk, in_fans.0, in_fans.1)),
                bq: p.add(n("attn.bq"), Matrix::zeros(1, hk)),
                wk: p.add(n("attn.wk"), weight(d, hk, in_fans.0, in_fans.1)),
                bk: p.add(n("attn.bk"), Matrix::zeros(1, hk)),
                wv: p.add(n("attn.wv"), weight(d, hk, in_fans.0, in_fans.1)),
                bv: p.add(n("attn.bv"), Matrix::zeros(1, hk)),
                wo: p.add(n("attn.wo"), weight(hk, d, out_fans.0, out_fans.1)),
                bo: p.add(n("attn.bo"), Matrix::zeros(1, d)),
                ln1_gamma: p.add(n("ln1.gamma"), Matrix::filled(1, d, T::one())),
                ln1_beta: p.add(n("ln1.beta"), Matrix::zeros(1, d)),
                ln2_gamma: p.add(n("ln2.gamma"), Matrix::filled(1, d, T::one())),
                ln2_beta: p.add(n("ln2.beta"), Matrix::zeros(1, d)),
                ff1_w: p.add(n("ff1.w"), weight(d, config.ff_dim, d, config.ff_dim)),
                ff1_b: p.add(n("ff1.b"), Matrix::zeros(1, config.ff_dim)),
                ff2_w: p.add(n("ff2.w"), weight(config.ff_dim, d, config.ff_dim, d)),
                ff2_b: p.add(n("ff2.b"), Matrix::zeros(1, d)),
            });
        }
        let mut dense = Vec::with_capacity(config.mlp_units.len());
        let mut fan_in = config.seq_len;
        for (j, &units) in config.mlp_units.iter().enumerate() {
            let w = p.add(
                format!("head.dense{j}.w"),
                weight(fan_in, units, fan_in, units),
            );
            let b = p.add(format!("head.dense{j}.b"), Matrix::zeros(1, units));
            dense.push((w, b));
            fan_in = units;
        }
        let out_w = p.add(
            "head.out.w",
            weight(fan_in, config.n_classes, fan_in, config.n_classes),
        );
        let out_b = p.add("head.out.b", Matrix::zeros(1, config.n_classes));
        EncoderClassifier {
            config: config.clone(),
            params: p,
            blocks,
            head: HeadParams {
                dense,
                out_w,
                out_b,
            },
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn check_input(&self, x: (usize, usize), batch: usize) -> Result<()> {
        let want = (batch * self.config.seq_len, self.config.d_model);
        if x != want || batch == 0 {
            return Err(Error::shape(
                "encoder input",
                format!("{x:?} given, {want:?} expected for batch {batch}"),
            ));
        }
        Ok(())
    }

    /// Multi-head self-attention: per-head `softmax(Q K^T / sqrt(d_k)) V`,
    /// heads concatenated, then projected back to `d` columns.
    fn attention_sublayer(&self, g: &mut Graph<T>, x: NodeId, bp: &BlockParams) -> Result<NodeId> {
        let p = &self.params;
        let proj = |g: &mut Graph<T>, w: ParamId, b: ParamId| -> Result<NodeId> {
            let w = g.param(p, w);
            let b = g.param(p, b);
            let xw = g.matmul(x, w)?;
            g.add_row(xw, b)
        };
        let q = proj(g, bp.wq, bp.bq)?;
        let k = proj(g, bp.wk, bp.bk)?;
        let v = proj(g, bp.wv, bp.bv)?;
        let z = g.attention(q, k, v, self.config.num_heads, self.config.seq_len)?;
        let wo = g.param(p, bp.wo);
        let bo = g.param(p, bp.bo);
        let zo = g.matmul(z, wo)?;
        g.add_row(zo, bo)
    }

    /// Position-wise `relu(x F1 + b1)` -> dropout -> `F2 + b2`.
    fn feed_forward_sublayer(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        bp: &BlockParams,
    ) -> Result<NodeId> {
        let p = &self.params;
        let w1 = g.param(p, bp.ff1_w);
        let b1 = g.param(p, bp.ff1_b);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.config.dropout)?;
        let w2 = g.param(p, bp.ff2_w);
        let b2 = g.param(p, bp.ff2_b);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    fn norm(&self, g: &mut Graph<T>, x: NodeId, gamma: ParamId, beta: ParamId) -> Result<NodeId> {
        let gm = g.param(&self.params, gamma);
        let bt = g.param(&self.params, beta);
        g.layer_norm(x, gm, bt, T::of(self.config.layernorm_epsilon))
    }

    fn block(&self, g: &mut Graph<T>, x: NodeId, bp: &BlockParams) -> Result<NodeId> {
        match self.config.norm_placement {
            NormPlacement::Pre => {
                let u = self.norm(g, x, bp.ln1_gamma, bp.ln1_beta)?;
                let a = self.attention_sublayer(g, u, bp)?;
                let a = g.dropout(a, self.config.dropout)?;
                let r1 = g.add(a, x)?;
                let v = self.norm(g, r1, bp.ln2_gamma, bp.ln2_beta)?;
                let f = self.feed_forward_sublayer(g, v, bp)?;
                g.add(f, v)
            }
            NormPlacement::Post => {
                let a = self.attention_sublayer(g, x, bp)?;
                let a = g.dropout(a, self.config.dropout)?;
                let r1 = g.add(a, x)?;
                let v = self.norm(g, r1, bp.ln1_gamma, bp.ln1_beta)?;
                let f = self.feed_forward_sublayer(g, v, bp)?;
                let r2 = g.add(f, v)?;
                self.norm(g, r2, bp.ln2_gamma, bp.ln2_beta)
            }
        }
    }

    /// Records the encoder stack on a `(batch * l, d)` input.
    pub fn build_encoder(&self, g: &mut Graph<T>, x: NodeId, batch: usize) -> Result<NodeId> {
        self.check_input(g.value(x).shape(), batch)?;
        let mut h = x;
        for (i, bp) in self.blocks.iter().enumerate() {
            g.set_scope(format!("block{i}"));
            h = self.block(g, h, bp)?;
        }
        g.set_scope("");
        Ok(h)
    }

    /// Records the full network up to the pre-softmax logits `(batch, k)`.
    pub fn build_logits(&self, g: &mut Graph<T>, x: NodeId, batch: usize) -> Result<NodeId> {
        let h = self.build_encoder(g, x, batch)?;
        g.set_scope("head");
        // average each position's features: (batch*l, d) -> (batch, l)
        let pooled = g.row_mean(h);
        let mut z = g.reshape(pooled, batch, self.config.seq_len)?;
        for &(w, b) in &self.head.dense {
            let wn = g.param(&self.params, w);
            let bn = g.param(&self.params, b);
            z = g.matmul(z, wn)?;
            z = g.add_row(z, bn)?;
            z = g.relu(z);
            z = g.dropout(z, self.config.mlp_dropout)?;
        }
        let wn = g.param(&self.params, self.head.out_w);
        let bn = g.param(&self.params, self.head.out_b);
        let z = g.matmul(z, wn)?;
        let logits = g.add_row(z, bn)?;
        g.set_scope("");
        Ok(logits)
    }

    /// Class probabilities for one `(l, d)` window.
    pub fn forward(&self, x: &Matrix<T>, mode: Mode, rng: Option<SeededRng>) -> Result<Vec<T>> {
        let probs = self.forward_batch(x, 1, mode, rng)?;
        Ok(probs.into_vec())
    }

    /// Class probabilities `(batch, k)` for stacked windows.
    pub fn forward_batch(
        &self,
        x: &Matrix<T>,
        batch: usize,
        mode: Mode,
        rng: Option<SeededRng>,
    ) -> Result<Matrix<T>> {
        self.check_input(x.shape(), batch)?;
        let mut g = Graph::new(mode, rng);
        let xi = g.input(x.clone());
        let logits = self.build_logits(&mut g, xi, batch)?;
        let probs = g.softmax_rows(logits);
        Ok(g.value(probs).clone())
    }

    /// Inference-mode probabilities for every window of `data`.
    pub fn predict(&self, data: &SequenceDataset<T>, batch_size: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let x = data.stack_windows(chunk);
            let probs = self.forward_batch(&x, chunk.len(), Mode::Infer, None)?;
            for r in 0..probs.rows() {
                out.push(probs.row(r).to_vec());
            }
        }
        Ok(out)
    }

    /// Batch-mean cross-entropy and its gradients in train mode. `rng`
    /// drives the dropout masks and is advanced past them.
    pub fn loss_and_gradients(
        &self,
        x: &Matrix<T>,
        targets: &Matrix<T>,
        rng: &mut SeededRng,
    ) -> Result<StepOutput<T>> {
        let batch = targets.rows();
        self.check_input(x.shape(), batch)?;
        let taken = std::mem::replace(rng, crate::rng::seeded(0));
        let mut g = Graph::new(Mode::Train, Some(taken));
        let xi = g.input(x.clone());
        let logits = self.build_logits(&mut g, xi, batch)?;
        let loss = g.softmax_cross_entropy(logits, targets.clone())?;
        let grads = g.backward(loss, &Matrix::filled(1, 1, T::one()))?;
        let probs = g
            .cross_entropy_probs(loss)
            .expect("loss node carries probabilities")
            .clone();
        let loss = g.value(loss).get(0, 0);
        *rng = g.into_rng().expect("train graph owns a generator");
        Ok(StepOutput { loss, probs, grads })
    }

    /// Inference-mode output of one encoder block's attention sublayer
    /// (projections, attention, output projection) on a single window.
    pub fn multi_head(&self, block: usize, x: &Matrix<T>) -> Result<Matrix<T>> {
        let bp = self.block_params(block)?;
        let mut g = Graph::new(Mode::Infer, None);
        let xi = g.input(x.clone());
        let out = self.attention_sublayer(&mut g, xi, bp)?;
        Ok(g.value(out).clone())
    }

    /// Inference-mode output of one block's position-wise feed-forward map.
    pub fn feed_forward(&self, block: usize, x: &Matrix<T>) -> Result<Matrix<T>> {
        let bp = self.block_params(block)?;
        let mut g = Graph::new(Mode::Infer, None);
        let xi = g.input(x.clone());
        let out = self.feed_forward_sublayer(&mut g, xi, bp)?;
        Ok(g.value(out).clone())
    }

    /// Output of one whole encoder block on a single window.
    pub fn encoder_block(&self, block: usize, x: &Matrix<T>) -> Result<Matrix<T>> {
        let bp = self.block_params(block)?;
        let mut g = Graph::new(Mode::Infer, None);
        let xi = g.input(x.clone());
        let out = self.block(&mut g, xi, bp)?;
        Ok(g.value(out).clone())
    }

    fn block_params(&self, block: usize) -> Result<&BlockParams> {
        self.blocks
            .get(block)
            .ok_or_else(|| Error::Invalid(format!("no encoder block {block}")))
    }

    /// Parameter id by name, e.g. `block0.attn.wo`.
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }
}

pub struct StepOutput<T: Scalar> {
    pub loss: T,
    /// Predicted probabilities, `(batch, k)`.
    pub probs: Matrix<T>,
    pub grads: Gradients<T>,
}

fn glorot<T: Scalar>(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Matrix<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.gen_range(-limit..limit)))
}

/// Single attention head without biases: `Q = X W_Q`, `K = X W_K`,
/// `V = X W_V`, `A = softmax(Q K^T / sqrt(d_k))`. Returns `(A, A V)`.
pub fn attention_head<T: Scalar>(
    x: &Matrix<T>,
    wq: &Matrix<T>,
    wk: &Matrix<T>,
    wv: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if wq.shape() != wk.shape() || wq.rows() != x.cols() || wv.rows() != x.cols() {
        return Err(Error::shape(
            "attention_head",
            format!(
                "x {:?}, w_q {:?}, w_k {:?}, w_v {:?}",
                x.shape(),
                wq.shape(),
                wk.shape(),
                wv.shape()
            ),
        ));
    }
    let q = x.matmul(wq)?;
    let k = x.matmul(wk)?;
    let v = x.matmul(wv)?;
    let scale = T::one() / T::from_usize(wq.cols()).unwrap().sqrt();
    let mut logits = Matrix::zeros(x.rows(), x.rows());
    crate::numcore::gemm(false, true, scale, &q, &k, T::zero(), &mut logits);
    let a = logits.softmax_rows();
    let av = a.matmul(&v)?;
    Ok((a, av))
}

/// Per-row `(x - mean) / (std + eps)` then `gamma * x + beta`.
pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Matrix<T>> {
    let mut g = Graph::new(Mode::Infer, None);
    let xi = g.input(x.clone());
    let gi = g.input(Matrix::row_vector(gamma));
    let bi = g.input(Matrix::row_vector(beta));
    let out = g.layer_norm(xi, gi, bi, eps)?;
    Ok(g.value(out).clone())
}

/// Batch-mean cross-entropy of the classifier on fixed windows and targets,
/// as a differentiable computation (used for gradient checks).
pub struct ClassifierLoss<'a, T: Scalar> {
    pub model: &'a EncoderClassifier<T>,
    pub targets: Matrix<T>,
}

impl<T: Scalar> Computation<T> for ClassifierLoss<'_, T> {
    fn input_shapes(&self) -> Vec<(usize, usize)> {
        let c = self.model.config();
        vec![(self.targets.rows() * c.seq_len, c.d_model)]
    }

    fn build(&self, g: &mut Graph<T>, params: &ParamStore<T>, inputs: &[NodeId]) -> Result<NodeId> {
        // evaluate against the supplied store so perturbed copies are honored
        let view = EncoderClassifier {
            config: self.model.config.clone(),
            params: params.clone(),
            blocks: self.model.blocks.clone(),
            head: self.model.head.clone(),
        };
        let logits = view.build_logits(g, inputs[0], self.targets.rows())?;
        g.softmax_cross_entropy(logits, self.targets.clone())
    }
}
