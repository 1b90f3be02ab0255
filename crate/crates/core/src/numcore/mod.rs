//! Dense matrices, learnable parameters and reverse-mode gradients.

mod graph;
mod matrix;
mod param;

pub use graph::{Gradients, Graph, Mode, NodeId, PROB_FLOOR};
pub(crate) use matrix::gemm;
pub use matrix::Matrix;
pub use param::{ParamId, ParamStore, ParamTensor};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};
use crate::scalar::Scalar;

/// A fixed computation over a parameter store, built onto a fresh tape.
pub trait Computation<T: Scalar> {
    /// Shapes the inputs must have, in order.
    fn input_shapes(&self) -> Vec<(usize, usize)>;

    /// Records the computation on `graph` and returns its output node.
    fn build(
        &self,
        graph: &mut Graph<T>,
        params: &ParamStore<T>,
        inputs: &[NodeId],
    ) -> Result<NodeId>;
}

/// Activation record of one evaluation; enough to run the reverse sweep.
pub struct Tape<T: Scalar> {
    pub graph: Graph<T>,
    pub output: NodeId,
    pub inputs: Vec<NodeId>,
}

/// Runs `comp` on `inputs`. In train mode `rng` drives dropout masks.
pub fn evaluate<T: Scalar, C: Computation<T> + ?Sized>(
    comp: &C,
    params: &ParamStore<T>,
    inputs: &[Matrix<T>],
    mode: Mode,
    rng: Option<SeededRng>,
) -> Result<(Matrix<T>, Tape<T>)> {
    let shapes = comp.input_shapes();
    if shapes.len() != inputs.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} inputs given, {} declared", inputs.len(), shapes.len()),
        ));
    }
    for (i, (m, &s)) in inputs.iter().zip(&shapes).enumerate() {
        if m.shape() != s {
            return Err(Error::shape(
                format!("input#{i}"),
                format!("{:?} given, {s:?} declared", m.shape()),
            ));
        }
    }
    let mut graph = Graph::new(mode, rng);
    let ids: Vec<NodeId> = inputs.iter().map(|m| graph.input(m.clone())).collect();
    let output = comp.build(&mut graph, params, &ids)?;
    let value = graph.value(output).clone();
    Ok((
        value,
        Tape {
            graph,
            output,
            inputs: ids,
        },
    ))
}

/// Reverse-mode gradients of `<upstream, output>` for every parameter used.
pub fn gradient<T: Scalar>(tape: &Tape<T>, upstream: &Matrix<T>) -> Result<Gradients<T>> {
    tape.graph.backward(tape.output, upstream)
}

/// Compares reverse-mode gradients with central differences.
///
/// The scalar objective is `<W, output>` for a fixed random weighting `W`.
/// Evaluation happens in train mode with the generator re-seeded from `seed`
/// before every run, so each perturbation sees the same dropout masks.
/// Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<C: Computation<f64> + ?Sized>(
    comp: &C,
    params: &ParamStore<f64>,
    inputs: &[Matrix<f64>],
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let run =
        |store: &ParamStore<f64>| evaluate(comp, store, inputs, Mode::Train, Some(seeded(seed)));
    let (out, tape) = run(params)?;
    let mut wrng = seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let weights = Matrix::from_fn(out.rows(), out.cols(), |_, _| wrng.gen_range(-1.0..1.0));
    let grads = gradient(&tape, &weights)?;
    let objective = |m: &Matrix<f64>| -> f64 {
        m.as_slice()
            .iter()
            .zip(weights.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        let name = params.get(id).name.clone();
        let zero = Matrix::zeros(params.get(id).value.rows(), params.get(id).value.cols());
        let analytic = grads.get(id).unwrap_or(&zero);
        for i in 0..params.get(id).value.len() {
            let orig = params.get(id).value.as_slice()[i];
            probe.get_mut(id).value.as_mut_slice()[i] = orig + epsilon;
            let plus = objective(&run(&probe)?.0);
            probe.get_mut(id).value.as_mut_slice()[i] = orig - epsilon;
            let minus = objective(&run(&probe)?.0);
            probe.get_mut(id).value.as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.as_slice()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("{name}[{i}]")));
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Identity;
    impl Computation<f64> for Identity {
        fn input_shapes(&self) -> Vec<(usize, usize)> {
            vec![(2, 2)]
        }
        fn build(
            &self,
            _: &mut Graph<f64>,
            _: &ParamStore<f64>,
            inputs: &[NodeId],
        ) -> Result<NodeId> {
            Ok(inputs[0])
        }
    }

    struct Softmax;
    impl Computation<f64> for Softmax {
        fn input_shapes(&self) -> Vec<(usize, usize)> {
            vec![(1, 2)]
        }
        fn build(
            &self,
            g: &mut Graph<f64>,
            _: &ParamStore<f64>,
            inputs: &[NodeId],
        ) -> Result<NodeId> {
            Ok(g.softmax_rows(inputs[0]))
        }
    }

    /// y = w x
    struct Linear(ParamId);
    impl Computation<f64> for Linear {
        fn input_shapes(&self) -> Vec<(usize, usize)> {
            vec![(3, 2)]
        }
        fn build(
            &self,
            g: &mut Graph<f64>,
            p: &ParamStore<f64>,
            inputs: &[NodeId],
        ) -> Result<NodeId> {
            let w = g.param(p, self.0);
            g.matmul(w, inputs[0])
        }
    }

    #[test]
    fn identity_graph() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (out, _) = evaluate(
            &Identity,
            &ParamStore::new(),
            std::slice::from_ref(&x),
            Mode::Infer,
            None,
        )
        .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn softmax_node_on_zero_row() {
        let x = Matrix::zeros(1, 2);
        let (out, _) = evaluate(&Softmax, &ParamStore::new(), &[x], Mode::Infer, None).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn evaluate_rejects_wrong_input_shape() {
        let err = evaluate(
            &Softmax,
            &ParamStore::new(),
            &[Matrix::zeros(2, 2)],
            Mode::Infer,
            None,
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("input#0"));
    }

    #[test]
    fn linear_finite_differences_are_exact() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Matrix::from_fn(2, 3, |r, c| (r as f64 - c as f64) * 0.7),
        );
        let x = Matrix::from_fn(3, 2, |r, c| (r + c) as f64 * 0.3 - 0.2);
        let err = finite_diff_check(&Linear(w), &store, &[x], 1e-5, 1).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let store = ParamStore::new();
        assert!(finite_diff_check(&Identity, &store, &[Matrix::zeros(2, 2)], 1e-2, 0).is_err());
    }
}
