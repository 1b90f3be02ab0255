use tsformer::model::{ClassifierLoss, EncoderClassifier, ModelConfig, NormPlacement};
use tsformer::numcore::{finite_diff_check, Matrix};
use tsformer::rng::seeded;

use rand::Rng;

fn reduced(placement: NormPlacement, dropout: f64) -> ModelConfig {
    ModelConfig {
        seq_len: 8,
        d_model: 4,
        n_classes: 3,
        num_heads: 2,
        head_size: 3,
        num_blocks: 1,
        ff_dim: 5,
        mlp_units: vec![4],
        dropout,
        mlp_dropout: dropout,
        norm_placement: placement,
        ..Default::default()
    }
}

fn inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> (Matrix<f64>, Matrix<f64>) {
    let mut rng = seeded(seed);
    let x = Matrix::from_fn(batch * cfg.seq_len, cfg.d_model, |_, _| {
        rng.gen_range(-1.5..1.5)
    });
    let y = Matrix::from_fn(batch, cfg.n_classes, |r, c| {
        f64::from(u8::from((r + 1) % cfg.n_classes == c))
    });
    (x, y)
}

/// Moves every parameter off its initial value. At initialization unit
/// scales and zero shifts make some activations sit exactly on relu kinks
/// (post-norm pooling is identically zero), where central differences are
/// meaningless.
fn jitter(model: &mut EncoderClassifier<f64>, seed: u64) {
    let mut rng = seeded(seed);
    for p in model.params_mut().iter_mut() {
        for v in p.value.as_mut_slice() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn check(cfg: &ModelConfig, batch: usize, seed: u64) -> f64 {
    let mut model = EncoderClassifier::<f64>::init(cfg, seed).unwrap();
    jitter(&mut model, seed + 200);
    let (x, y) = inputs(cfg, batch, seed + 100);
    let loss = ClassifierLoss {
        model: &model,
        targets: y,
    };
    finite_diff_check(&loss, model.params(), &[x], 1e-6, seed).unwrap()
}

#[test]
fn pre_norm_reduced_model() {
    let err = check(&reduced(NormPlacement::Pre, 0.0), 3, 1);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn post_norm_reduced_model() {
    let err = check(&reduced(NormPlacement::Post, 0.0), 3, 2);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradients_with_fixed_dropout_masks() {
    let err = check(&reduced(NormPlacement::Pre, 0.25), 2, 3);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn two_blocks_two_dense_layers() {
    let cfg = ModelConfig {
        num_blocks: 2,
        mlp_units: vec![5, 3],
        ..reduced(NormPlacement::Pre, 0.0)
    };
    let err = check(&cfg, 2, 4);
    assert!(err < 1e-4, "max relative error {err}");
}

/// One bias-free attention head `softmax(X W_Q (X W_K)^T / sqrt(d_k)) X W_V`.
struct SingleHead {
    wq: tsformer::numcore::ParamId,
    wk: tsformer::numcore::ParamId,
    wv: tsformer::numcore::ParamId,
}

impl tsformer::numcore::Computation<f64> for SingleHead {
    fn input_shapes(&self) -> Vec<(usize, usize)> {
        vec![(4, 4)]
    }

    fn build(
        &self,
        g: &mut tsformer::numcore::Graph<f64>,
        p: &tsformer::numcore::ParamStore<f64>,
        inputs: &[tsformer::numcore::NodeId],
    ) -> tsformer::Result<tsformer::numcore::NodeId> {
        let x = inputs[0];
        let (wq, wk, wv) = (
            g.param(p, self.wq),
            g.param(p, self.wk),
            g.param(p, self.wv),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        g.attention(q, k, v, 1, 4)
    }
}

#[test]
fn single_head_attention() {
    let mut rng = seeded(21);
    let mut store = tsformer::numcore::ParamStore::new();
    let mut w =
        |name: &str| store.add(name, Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0)));
    let head = SingleHead {
        wq: w("wq"),
        wk: w("wk"),
        wv: w("wv"),
    };
    let x = Matrix::from_fn(4, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
    let err = finite_diff_check(&head, &store, &[x], 1e-6, 0).unwrap();
    assert!(err < 1e-5, "max relative error {err}");
}
