//! Routers and top-k sparsification.
//!
//! Three scoring functions map token vectors `[.., d]` to expert logits
//! `[.., E]`:
//!
//! * attention-inspired: keys `K = x·W_k + b_k`, input-agnostic expert
//!   queries `EQ = W_q + b_q`, Kronecker features `K ⊗ EQ[:,e]` projected by
//!   `W_e[:,e]` and scaled by `1/√d`;
//! * HMM: `(x·W)·Q/√d + m` with a learnable log-prior `m`;
//! * classic: a single affine layer.
//!
//! Scores go through a softmax over experts, then [`topk_renormalize`]
//! keeps the `k` largest probabilities per token and rescales them to sum
//! to one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::graph::select_topk;
use crate::nncore::{Graph, Mode, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    Attention,
    Hmm,
    Classic,
}

impl RouterKind {
    pub const ALL: [RouterKind; 3] = [RouterKind::Attention, RouterKind::Hmm, RouterKind::Classic];
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouterKind::Attention => "attention",
            RouterKind::Hmm => "hmm",
            RouterKind::Classic => "classic",
        })
    }
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(RouterKind::Attention),
            "hmm" => Ok(RouterKind::Hmm),
            "classic" => Ok(RouterKind::Classic),
            other => Err(Error::Config(format!(
                "unknown router '{other}' (expected attention, hmm or classic)"
            ))),
        }
    }
}

/// Parameters of the attention-inspired gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGateParams {
    /// `[d, d]`
    pub w_k: Tensor,
    /// `[d]`
    pub b_k: Tensor,
    /// `[d, E]`
    pub w_q: Tensor,
    /// `[E]`, broadcast over the rows of `w_q`.
    pub b_q: Tensor,
    /// `[d², E]`
    pub w_e: Tensor,
}

impl AttentionGateParams {
    pub fn random(d: usize, experts: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_k: Tensor::uniform(&[d, d], 1.0, rng),
            b_k: Tensor::uniform(&[d], 1.0, rng),
            w_q: Tensor::uniform(&[d, experts], 1.0, rng),
            b_q: Tensor::uniform(&[experts], 1.0, rng),
            w_e: Tensor::uniform(&[d * d, experts], 1.0, rng),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w_k.shape()[0], self.w_q.shape()[1])
    }

    /// `EQ = W_q + b_q`; depends on parameters only.
    pub fn expert_queries(&self) -> Tensor {
        let (d, e) = self.dims();
        let mut eq = self.w_q.clone();
        for j in 0..d {
            for c in 0..e {
                eq.data_mut()[j * e + c] += self.b_q.data()[c];
            }
        }
        eq
    }
}

/// Parameters of the HMM-style gate.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmGateParams {
    /// `[d, d]` input-to-embedding map.
    pub w: Tensor,
    /// `[d, E]`
    pub q: Tensor,
    /// `[E]` log-prior over experts.
    pub m: Tensor,
}

impl HmmGateParams {
    pub fn random(d: usize, experts: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::uniform(&[d, d], 1.0, rng),
            q: Tensor::uniform(&[d, experts], 1.0, rng),
            m: Tensor::uniform(&[experts], 1.0, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicGateParams {
    /// `[d, E]`
    pub w_g: Tensor,
    /// `[E]`
    pub b_g: Tensor,
}

impl ClassicGateParams {
    pub fn random(d: usize, experts: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_g: Tensor::uniform(&[d, experts], 1.0, rng),
            b_g: Tensor::uniform(&[experts], 1.0, rng),
        }
    }
}

/// Row-major Kronecker product: `out[i·d + j] = u[i]·v[j]`.
pub fn kron(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::shape("kron", &[u.len()], &[v.len()]));
    }
    Ok(u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect())
}

fn keys(x: &Tensor, p: &AttentionGateParams) -> Result<(Vec<f64>, usize, usize)> {
    let (d, _) = p.dims();
    if x.cols() != d {
        return Err(Error::shape("attention gate input", x.shape(), p.w_k.shape()));
    }
    let rows = x.numel() / d;
    let mut k = vec![0.0; rows * d];
    for r in 0..rows {
        for i in 0..d {
            let mut acc = p.b_k.data()[i];
            for j in 0..d {
                acc += x.data()[r * d + j] * p.w_k.data()[j * d + i];
            }
            k[r * d + i] = acc;
        }
    }
    Ok((k, rows, d))
}

fn score_shape(x: &Tensor, e: usize) -> Vec<usize> {
    let mut s = x.shape().to_vec();
    *s.last_mut().unwrap() = e;
    s
}

/// Attention-gate scores by explicitly materialising `K[t] ⊗ EQ[:,e]` and
/// projecting with `W_e[:,e]`. Reference path; `O(rows·E·d²)` memory traffic.
pub fn attention_gate_scores_kron(x: &Tensor, p: &AttentionGateParams) -> Result<Tensor> {
    let (d, e) = p.dims();
    let (k, rows, _) = keys(x, p)?;
    let eq = p.expert_queries();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; rows * e];
    for r in 0..rows {
        for c in 0..e {
            let q: Vec<f64> = (0..d).map(|j| eq.data()[j * e + c]).collect();
            let z = kron(&k[r * d..(r + 1) * d], &q)?;
            let s: f64 = z.iter().enumerate().map(|(idx, zv)| p.w_e.data()[idx * e + c] * zv).sum();
            out[r * e + c] = s * scale;
        }
    }
    Tensor::new(&score_shape(x, e), out)
}

/// Attention-gate scores via the bilinear form `EQ[:,e]ᵀ · M_e · K[t]`, where
/// `M_e[j][i] = W_e[i·d + j, e]` (the transpose of the row-major reshape of
/// column `e`).
pub fn attention_gate_scores_bilinear(x: &Tensor, p: &AttentionGateParams) -> Result<Tensor> {
    let (d, e) = p.dims();
    let (k, rows, _) = keys(x, p)?;
    let eq = p.expert_queries();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; rows * e];
    for c in 0..e {
        let m: Vec<f64> = (0..d * d)
            .map(|idx| {
                let (j, i) = (idx / d, idx % d);
                p.w_e.data()[(i * d + j) * e + c]
            })
            .collect();
        for r in 0..rows {
            let kr = &k[r * d..(r + 1) * d];
            let mut s = 0.0;
            for j in 0..d {
                let mk: f64 = (0..d).map(|i| m[j * d + i] * kr[i]).sum();
                s += eq.data()[j * e + c] * mk;
            }
            out[r * e + c] = s * scale;
        }
    }
    Tensor::new(&score_shape(x, e), out)
}

/// Node handles for whichever router a model carries.
#[derive(Debug, Clone, Copy)]
pub enum RouterNodes {
    Attention {
        w_k: NodeId,
        b_k: NodeId,
        w_q: NodeId,
        b_q: NodeId,
        w_e: NodeId,
    },
    Hmm {
        w: NodeId,
        q: NodeId,
        m: NodeId,
    },
    Classic {
        w_g: NodeId,
        b_g: NodeId,
    },
}

impl RouterNodes {
    /// Expert logits for every row of `x`.
    pub fn scores(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let d = *g
            .shape(x)
            .last()
            .ok_or_else(|| Error::Config("router input must have a feature axis".into()))?;
        let scale = 1.0 / (d as f64).sqrt();
        match *self {
            RouterNodes::Attention {
                w_k,
                b_k,
                w_q,
                b_q,
                w_e,
            } => {
                let k = g.linear(x, w_k, Some(b_k))?;
                let eq = g.add_broadcast(w_q, b_q)?;
                g.kron_gate(k, eq, w_e, scale)
            }
            RouterNodes::Hmm { w, q, m } => {
                let z = g.linear(x, w, None)?;
                let z = g.scale(z, scale);
                g.linear(z, q, Some(m))
            }
            RouterNodes::Classic { w_g, b_g } => g.linear(x, w_g, Some(b_g)),
        }
    }
}

/// Parameter indices of a router inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterLayout {
    Attention {
        w_k: usize,
        b_k: usize,
        w_q: usize,
        b_q: usize,
        w_e: usize,
    },
    Hmm {
        w: usize,
        q: usize,
        m: usize,
    },
    Classic {
        w_g: usize,
        b_g: usize,
    },
}

impl RouterLayout {
    /// Register initialised router parameters under `router.*`. Affine maps
    /// draw uniform(±1/√fan_in); expert queries draw normal(0, 0.02); the
    /// query bias and HMM log-prior start at zero.
    pub fn init(store: &mut ParamStore, kind: RouterKind, d: usize, e: usize, rng: &mut impl Rng) -> Self {
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        match kind {
            RouterKind::Attention => RouterLayout::Attention {
                w_k: store.push("router.w_k", Tensor::uniform(&[d, d], inv_sqrt_d, rng)),
                b_k: store.push("router.b_k", Tensor::uniform(&[d], inv_sqrt_d, rng)),
                w_q: store.push("router.w_q", Tensor::normal(&[d, e], 0.02, rng)),
                b_q: store.push("router.b_q", Tensor::zeros(&[e])),
                w_e: store.push("router.w_e", Tensor::uniform(&[d * d, e], 1.0 / d as f64, rng)),
            },
            RouterKind::Hmm => RouterLayout::Hmm {
                w: store.push("router.w", Tensor::uniform(&[d, d], inv_sqrt_d, rng)),
                q: store.push("router.q", Tensor::normal(&[d, e], 0.02, rng)),
                m: store.push("router.m", Tensor::zeros(&[e])),
            },
            RouterKind::Classic => RouterLayout::Classic {
                w_g: store.push("router.w_g", Tensor::uniform(&[d, e], inv_sqrt_d, rng)),
                b_g: store.push("router.b_g", Tensor::uniform(&[e], inv_sqrt_d, rng)),
            },
        }
    }

    pub fn nodes(&self, bound: &[NodeId]) -> RouterNodes {
        match *self {
            RouterLayout::Attention {
                w_k,
                b_k,
                w_q,
                b_q,
                w_e,
            } => RouterNodes::Attention {
                w_k: bound[w_k],
                b_k: bound[b_k],
                w_q: bound[w_q],
                b_q: bound[b_q],
                w_e: bound[w_e],
            },
            RouterLayout::Hmm { w, q, m } => RouterNodes::Hmm {
                w: bound[w],
                q: bound[q],
                m: bound[m],
            },
            RouterLayout::Classic { w_g, b_g } => RouterNodes::Classic {
                w_g: bound[w_g],
                b_g: bound[b_g],
            },
        }
    }

    /// Number of router parameters for `kind` at width `d` with `e` experts.
    pub fn parameter_count(kind: RouterKind, d: usize, e: usize) -> usize {
        match kind {
            RouterKind::Attention => d * d + d + d * e + e + d * d * e,
            RouterKind::Hmm => d * d + d * e + e,
            RouterKind::Classic => d * e + e,
        }
    }
}

/// Dense probabilities, top-k mask, renormalised weights and chosen experts
/// for a batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Leading shape of the routed tokens, e.g. `[B, T]`.
    pub token_shape: Vec<usize>,
    pub experts: usize,
    pub k: usize,
    /// `tokens × E` softmax output.
    pub probs: Vec<f64>,
    /// `tokens × E` binary.
    pub mask: Vec<f64>,
    /// `tokens × E`, exactly `k` non-zeros per row.
    pub weights: Vec<f64>,
    /// `tokens × k`, best first.
    pub selected: Vec<usize>,
}

impl RoutingDecision {
    pub(crate) fn from_graph(g: &Graph, probs: NodeId, weights: NodeId) -> Self {
        let shape = g.shape(weights);
        let (lead, e) = shape.split_at(shape.len() - 1);
        let (selected, k) = g
            .topk_selection(weights)
            .expect("weights node comes from topk_renormalize");
        let experts = e[0];
        let mut mask = vec![0.0; g.value(weights).len()];
        for (r, sel) in selected.chunks_exact(k).enumerate() {
            for &i in sel {
                mask[r * experts + i] = 1.0;
            }
        }
        Self {
            token_shape: lead.to_vec(),
            experts,
            k,
            probs: g.value(probs).to_vec(),
            mask,
            weights: g.value(weights).to_vec(),
            selected: selected.to_vec(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.token_shape.iter().product()
    }

    pub fn selected_for(&self, token: usize) -> &[usize] {
        &self.selected[token * self.k..(token + 1) * self.k]
    }

    pub fn weights_for(&self, token: usize) -> &[f64] {
        &self.weights[token * self.experts..(token + 1) * self.experts]
    }

    pub fn probs_for(&self, token: usize) -> &[f64] {
        &self.probs[token * self.experts..(token + 1) * self.experts]
    }

    /// Selected experts of `token`, ascending.
    pub fn expert_set(&self, token: usize) -> Vec<usize> {
        let mut s = self.selected_for(token).to_vec();
        s.sort_unstable();
        s
    }
}

fn eval_scores(x: &Tensor, bind: impl FnOnce(&mut Graph) -> RouterNodes) -> Result<Tensor> {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(x);
    let nodes = bind(&mut g);
    let s = nodes.scores(&mut g, xi)?;
    Ok(g.tensor(s))
}

/// Attention-gate logits `[.., E]` for `x: [.., d]`.
pub fn attention_gate_scores(x: &Tensor, p: &AttentionGateParams) -> Result<Tensor> {
    eval_scores(x, |g| RouterNodes::Attention {
        w_k: g.constant(&p.w_k),
        b_k: g.constant(&p.b_k),
        w_q: g.constant(&p.w_q),
        b_q: g.constant(&p.b_q),
        w_e: g.constant(&p.w_e),
    })
}

pub fn hmm_gate_scores(x: &Tensor, p: &HmmGateParams) -> Result<Tensor> {
    eval_scores(x, |g| RouterNodes::Hmm {
        w: g.constant(&p.w),
        q: g.constant(&p.q),
        m: g.constant(&p.m),
    })
}

pub fn classic_gate_scores(x: &Tensor, p: &ClassicGateParams) -> Result<Tensor> {
    eval_scores(x, |g| RouterNodes::Classic {
        w_g: g.constant(&p.w_g),
        b_g: g.constant(&p.b_g),
    })
}

/// Softmax over the expert (last) axis.
pub fn gate_probabilities(scores: &Tensor) -> Result<Tensor> {
    if scores.shape().is_empty() {
        return Err(Error::Config("gate scores need an expert axis".into()));
    }
    crate::nncore::softmax(scores, scores.shape().len() - 1)
}

/// Graph form of scores → probabilities → top-k renormalised weights.
/// Returns `(probs, weights)` nodes.
pub fn route(g: &mut Graph, scores: NodeId, k: usize) -> Result<(NodeId, NodeId)> {
    let axis = g.shape(scores).len().saturating_sub(1);
    let probs = g.softmax(scores, axis)?;
    let weights = g.topk_renormalize(probs, k)?;
    Ok((probs, weights))
}

/// Keep the `k` largest probabilities per token (ties to the lower expert
/// index), zero the rest and rescale the survivors to sum to one.
pub fn topk_renormalize(probs: &Tensor, k: usize) -> Result<RoutingDecision> {
    if probs.shape().is_empty() {
        return Err(Error::Config("routing probabilities need an expert axis".into()));
    }
    let mut g = Graph::new(Mode::Eval);
    let p = g.constant(probs);
    let w = g.topk_renormalize(p, k)?;
    Ok(RoutingDecision::from_graph(&g, p, w))
}

/// Indices of the `k` largest entries, ties toward the lower index.
pub fn argmax_k(row: &[f64], k: usize) -> Vec<usize> {
    select_topk(row, k)
}


#[cfg(test)]
mod property_tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nncore::gradcheck::{check_gradients, random_tensor, GradCheckOptions};

    #[test]
    fn score_gradients_match_finite_differences() {
        let (d, e, t) = (3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_tensor(&[1, t, d], &mut rng);
        let cases: Vec<(Vec<Tensor>, fn(&[NodeId]) -> RouterNodes)> = vec![
            (
                vec![
                    x.clone(),
                    random_tensor(&[d, d], &mut rng),
                    random_tensor(&[d], &mut rng),
                    random_tensor(&[d, e], &mut rng),
                    random_tensor(&[e], &mut rng),
                    random_tensor(&[d * d, e], &mut rng),
                ],
                |ids| RouterNodes::Attention {
                    w_k: ids[1],
                    b_k: ids[2],
                    w_q: ids[3],
                    b_q: ids[4],
                    w_e: ids[5],
                },
            ),
            (
                vec![
                    x.clone(),
                    random_tensor(&[d, d], &mut rng),
                    random_tensor(&[d, e], &mut rng),
                    random_tensor(&[e], &mut rng),
                ],
                |ids| RouterNodes::Hmm {
                    w: ids[1],
                    q: ids[2],
                    m: ids[3],
                },
            ),
            (
                vec![x, random_tensor(&[d, e], &mut rng), random_tensor(&[e], &mut rng)],
                |ids| RouterNodes::Classic { w_g: ids[1], b_g: ids[2] },
            ),
        ];
        for (inputs, nodes) in cases {
            let r = check_gradients(
                &inputs,
                |g, ids| nodes(ids).scores(g, ids[0]),
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
        }
    }

    #[test]
    fn attention_scores_are_linear_in_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = AttentionGateParams::random(3, 4, &mut rng);
        let x = random_tensor(&[2, 3], &mut rng);
        let base = attention_gate_scores(&x, &p).unwrap();
        let mut scaled = p.clone();
        scaled.w_e.data_mut().iter_mut().for_each(|v| *v *= 2.5);
        let s = attention_gate_scores(&x, &scaled).unwrap();
        for (a, b) in s.data().iter().zip(base.data()) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn expert_queries_ignore_input_but_get_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = AttentionGateParams::random(3, 2, &mut rng);
        let eq = p.expert_queries();
        let grads: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let x = random_tensor(&[4, 3], &mut rng);
                let mut g = Graph::new(Mode::Eval);
                let xi = g.constant(&x);
                let ids = [p.w_k.clone(), p.b_k.clone(), p.w_q.clone(), p.b_q.clone(), p.w_e.clone()].map(|t| g.param(&t));
                let nodes = RouterNodes::Attention {
                    w_k: ids[0],
                    b_k: ids[1],
                    w_q: ids[2],
                    b_q: ids[3],
                    w_e: ids[4],
                };
                let s = nodes.scores(&mut g, xi).unwrap();
                let loss = g.sum(s);
                g.backward(loss);
                assert_eq!(p.expert_queries(), eq);
                g.grad(ids[2]).unwrap().to_vec()
            })
            .collect();
        assert_ne!(grads[0], grads[1]);
    }

    fn probs_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-3f64..1.0, 1..=8).prop_map(|v| {
            let z: f64 = v.iter().sum();
            v.into_iter().map(|x| x / z).collect()
        })
    }

    proptest! {
        #[test]
        fn exact_sparsity_and_ratios(p in probs_row(), kk in 0usize..8) {
            let e = p.len();
            let k = kk % e + 1;
            let d = topk_renormalize(&Tensor::new(&[1, e], p.clone()).unwrap(), k).unwrap();
            let nz: Vec<usize> = (0..e).filter(|&i| d.weights[i] != 0.0).collect();
            prop_assert_eq!(nz.len(), k);
            for &i in &nz {
                for &j in &nz {
                    prop_assert!((d.weights[i] / d.weights[j] - p[i] / p[j]).abs() <= 1e-9 * (p[i] / p[j]).max(1.0));
                }
            }
        }

        #[test]
        fn shifting_logits_keeps_selection(
            logits in prop::collection::vec(-5.0f64..5.0, 2..=8),
            shift in -50.0f64..50.0,
            kk in 0usize..8,
        ) {
            let e = logits.len();
            let k = kk % e + 1;
            let softmax = |v: &[f64]| crate::nncore::layers::softmax(&Tensor::new(&[1, e], v.to_vec()).unwrap(), 1).unwrap();
            let a = topk_renormalize(&softmax(&logits), k).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = topk_renormalize(&softmax(&shifted), k).unwrap();
            prop_assert_eq!(a.expert_set(0), b.expert_set(0));
        }
    }
}
