//! Composite layers on top of the tape, plus eager tensor helpers.

use super::graph::{Graph, Mode, NodeId};
use super::rng::DropoutRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Node handles for an affine map.
#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Query/key/value/output projections of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub q: LinearNodes,
    pub k: LinearNodes,
    pub v: LinearNodes,
    pub o: LinearNodes,
}

pub fn affine(g: &mut Graph, x: NodeId, p: LinearNodes) -> Result<NodeId> {
    g.linear(x, p.w, Some(p.b))
}

pub fn norm(g: &mut Graph, x: NodeId, p: NormNodes) -> Result<NodeId> {
    g.layer_norm(x, p.gamma, p.beta, LAYER_NORM_EPS)
}

/// Attention for an arbitrary subset of query positions.
///
/// `seqs` is `[S, T, d]`; `query_rows` holds `[R, d]` token vectors taken
/// from those sequences and `row_seq[r]` names the sequence row `r` came
/// from. Keys and values are computed for every position of every sequence.
/// Returns `[R, d]` after the output projection.
pub fn attend_rows(
    g: &mut Graph,
    seqs: NodeId,
    query_rows: NodeId,
    row_seq: Vec<usize>,
    p: &AttentionNodes,
    heads: usize,
) -> Result<NodeId> {
    let s = g.shape(seqs).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("attention input", &s, &[0, 0, 0]));
    }
    if heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "d_model {} is not divisible by {heads} heads",
            s[2]
        )));
    }
    let q = affine(g, query_rows, p.q)?;
    let k = affine(g, seqs, p.k)?;
    let v = affine(g, seqs, p.v)?;
    let a = g.attention(q, k, v, row_seq, heads)?;
    affine(g, a, p.o)
}

/// Non-causal multi-head self-attention over `[B, T, d]`.
pub fn multi_head_self_attention(
    g: &mut Graph,
    x: NodeId,
    p: &AttentionNodes,
    heads: usize,
) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("multi_head_self_attention", &s, &[0, 0, 0]));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let rows = g.reshape(x, &[b * t, d])?;
    let row_seq = (0..b * t).map(|r| r / t).collect();
    let out = attend_rows(g, x, rows, row_seq, p, heads)?;
    g.reshape(out, &[b, t, d])
}

fn eval_graph<F>(f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new(Mode::Eval);
    let out = f(&mut g)?;
    Ok(g.tensor(out))
}

pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    eval_graph(|g| {
        let (x, w, b) = (g.constant(x), g.constant(w), g.constant(b));
        g.linear(x, w, Some(b))
    })
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    eval_graph(|g| {
        let x = g.constant(x);
        g.softmax(x, axis)
    })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    eval_graph(|g| {
        let (x, gm, bt) = (g.constant(x), g.constant(gamma), g.constant(beta));
        g.layer_norm(x, gm, bt, eps)
    })
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let t = eval_graph(|g| {
        let (p, t) = (g.constant(pred), g.constant(target));
        g.mse(p, t)
    })?;
    Ok(t.data()[0])
}

/// Eager dropout with its own seeded stream.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, seed: u64) -> Result<Tensor> {
    let mut rng = DropoutRng::new(seed);
    let mut g = Graph::new(mode);
    let id = g.constant(x);
    let out = g.dropout(id, p, &mut rng)?;
    Ok(g.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_hand_cases() {
        let y = linear(
            &t(&[2], &[1.0, 0.0]),
            &t(&[2, 2], &[2.0, 0.0, 0.0, 3.0]),
            &t(&[2], &[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[2.0, 0.0]);
        let y = linear(
            &t(&[2], &[1.0, 1.0]),
            &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            &t(&[2], &[1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear(&t(&[3], &[1.0; 3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&t(&[3], &[1000.0, 0.0, 0.0]), 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-12);
        let y = softmax(&t(&[3], &[2f64.ln(), 0.0, 0.0]), 0).unwrap();
        for (a, b) in y.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let y = softmax(&t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&t(&[2], &[f64::NAN, 0.0]), 0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[3], &[1.0, 1.0, 1.0]), &one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let y = layer_norm(
            &t(&[2], &[-1.0, 1.0]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-300,
        )
        .unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = Tensor::zeros(&[2]);
        assert!(layer_norm(&x, &Tensor::full(&[2], 1.0), &x, 0.0).is_err());
    }

    #[test]
    fn mse_cases() {
        let a = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a, &t(&[1, 2], &[1.0, 1.0])).unwrap(), 1.0);
        assert!(mse_loss(&a, &t(&[2, 1], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_errors() {
        let x = t(&[4], &[1.0, -2.0, 3.5, 0.25]);
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, Mode::Eval, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, Mode::Eval, 1).unwrap(), x);
        assert!(dropout(&x, 1.0, Mode::Train, 1).is_err());
        assert_eq!(
            dropout(&x, 0.5, Mode::Train, 3).unwrap(),
            dropout(&x, 0.5, Mode::Train, 3).unwrap()
        );
    }

    #[test]
    fn dropout_is_unbiased() {
        // Monte-Carlo: 10^4 independent draws of a fixed vector.
        let x = t(&[4], &[1.0, -2.0, 3.0, 0.5]);
        let mut g = Graph::new(Mode::Train);
        let mut rng = DropoutRng::new(42);
        let id = g.constant(&x);
        // Pooled ratio out/x over 4·10^4 element draws: sd 0.5%, so 2% is a 4σ band.
        let mut ratio = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let out = g.dropout(id, 0.5, &mut rng).unwrap();
            for (v, w) in g.value(out).iter().zip(x.data()) {
                ratio += v / w;
            }
        }
        let mean = ratio / (4 * n) as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}

#[cfg(test)]
mod grad_tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nncore::gradcheck::{check_gradients, random_tensor, GradCheckOptions};

    fn attention_params(ids: &[NodeId]) -> AttentionNodes {
        let lin = |i: usize| LinearNodes { w: ids[i], b: ids[i + 1] };
        AttentionNodes {
            q: lin(0),
            k: lin(2),
            v: lin(4),
            o: lin(6),
        }
    }

    fn attention_inputs(d: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        (0..4)
            .flat_map(|_| [random_tensor(&[d, d], rng), random_tensor(&[d], rng)])
            .collect()
    }

    #[test]
    fn linear_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            random_tensor(&[4, 3], &mut rng),
            random_tensor(&[3, 2], &mut rng),
            random_tensor(&[2], &mut rng),
        ];
        let r = check_gradients(
            &inputs,
            |g, x| {
                let y = g.linear(x[0], x[1], Some(x[2]))?;
                Ok(g.sum(y))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-6, "{:?}", r.rel_errors);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![
            random_tensor(&[2, 4], &mut rng),
            random_tensor(&[4], &mut rng),
            random_tensor(&[4], &mut rng),
        ];
        let r = check_gradients(
            &inputs,
            |g, x| g.layer_norm(x[0], x[1], x[2], LAYER_NORM_EPS),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-5, "{:?}", r.rel_errors);
    }

    #[test]
    fn mse_gradient_formula() {
        let pred = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
        let target = Tensor::new(&[2, 3], vec![1.0, 1.0, 1.0, -1.0, 0.0, 0.25]).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let p = g.param(&pred);
        let t = g.constant(&target);
        let loss = g.mse(p, t).unwrap();
        g.backward(loss);
        let expect: Vec<f64> = pred.data().iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b) / 6.0).collect();
        for (a, b) in g.grad(p).unwrap().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let r = check_gradients(&[pred, target], |g, x| g.mse(x[0], x[1]), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error() < 1e-8);
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inputs = vec![random_tensor(&[1, 3, 4], &mut rng)];
        inputs.extend(attention_inputs(4, &mut rng));
        let r = check_gradients(
            &inputs,
            |g, x| {
                let p = attention_params(&x[1..]);
                multi_head_self_attention(g, x[0], &p, 2)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    fn run_attention(x: &Tensor, params: &[Tensor], heads: usize) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval);
        let xi = g.constant(x);
        let ids: Vec<NodeId> = params.iter().map(|t| g.constant(t)).collect();
        let p = attention_params(&ids);
        let out = multi_head_self_attention(&mut g, xi, &p, heads)?;
        Ok(g.tensor(out))
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = attention_inputs(4, &mut rng);
        let x = random_tensor(&[2, 1, 4], &mut rng);
        let out = run_attention(&x, &params, 2).unwrap();
        let rows = x.clone().reshape(&[2, 4]).unwrap();
        let v = linear(&rows, &params[4], &params[5]).unwrap();
        let expect = linear(&v, &params[6], &params[7]).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = attention_inputs(6, &mut rng);
        let token = random_tensor(&[6], &mut rng);
        let x = Tensor::new(&[1, 5, 6], token.data().repeat(5)).unwrap();
        let out = run_attention(&x, &params, 3).unwrap();
        for t in 1..5 {
            for j in 0..6 {
                assert!((out.data()[t * 6 + j] - out.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = attention_inputs(4, &mut rng);
        let x = random_tensor(&[1, 2, 4], &mut rng);
        assert!(matches!(run_attention(&x, &params, 3), Err(Error::Config(_))));
    }
}
