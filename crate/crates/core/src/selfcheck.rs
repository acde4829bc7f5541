//! Built-in correctness checks: finite-difference gradients for every op
//! and model block, gate-path equivalence, top-k contract and sparse-versus-
//! dense expert evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gating::{
    attention_gate_scores_bilinear, attention_gate_scores_kron, AttentionGateParams, RouterKind,
};
use crate::moe::{expert_forward, forecast_head, prepare_block, embed_inputs, ExpertEval, GateTsConfig, Model};
use crate::nncore::gradcheck::random_tensor;
use crate::nncore::layers::multi_head_self_attention;
use crate::nncore::{
    check_gradients, lstm_forward, DropoutRng, ExpertRows, GradCheckOptions, Graph, LstmNodes, LinearNodes, Mode,
    NodeId, Tensor,
};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GATE_TOLERANCE: f64 = 1e-10;
pub const SPARSE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error.
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Added to every analytic gradient; a non-zero value must make the
    /// gradient checks fail.
    pub perturb: f64,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self { seed: 0, perturb: 0.0 }
    }
}

type OpFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct GradCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    mode: Mode,
    f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        mode: Mode::Eval,
        f: Box::new(f),
    }
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).expect("shape matches")
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let r = |s: &[usize], rng: &mut ChaCha8Rng| random_tensor(s, rng);
    let mut cases = vec![
        case("linear", vec![r(&[3, 4], rng), r(&[4, 5], rng), r(&[5], rng)], |g, x| {
            g.linear(x[0], x[1], Some(x[2]))
        }),
        case("linear_no_bias", vec![r(&[2, 3, 4], rng), r(&[4, 2], rng)], |g, x| g.linear(x[0], x[1], None)),
        case("add", vec![r(&[3, 4], rng), r(&[3, 4], rng)], |g, x| g.add(x[0], x[1])),
        case("add_broadcast", vec![r(&[2, 3, 4], rng), r(&[3, 4], rng)], |g, x| g.add_broadcast(x[0], x[1])),
        case("mul", vec![r(&[3, 4], rng), r(&[3, 4], rng)], |g, x| g.mul(x[0], x[1])),
        case("scale", vec![r(&[5], rng)], |g, x| Ok(g.scale(x[0], -1.7))),
        case("gelu", vec![r(&[4, 3], rng)], |g, x| Ok(g.gelu(x[0]))),
        case("sigmoid", vec![r(&[4, 3], rng)], |g, x| Ok(g.sigmoid(x[0]))),
        case("tanh", vec![r(&[4, 3], rng)], |g, x| Ok(g.tanh(x[0]))),
        case("layer_norm", vec![r(&[3, 5], rng), r(&[5], rng), r(&[5], rng)], |g, x| {
            g.layer_norm(x[0], x[1], x[2], 1e-5)
        }),
        case("softmax_last_axis", vec![r(&[3, 4], rng)], |g, x| g.softmax(x[0], 1)),
        case("softmax_first_axis", vec![r(&[3, 2, 2], rng)], |g, x| g.softmax(x[0], 0)),
        case(
            "attention",
            vec![r(&[4, 4], rng), r(&[2, 3, 4], rng), r(&[2, 3, 4], rng)],
            |g, x| g.attention(x[0], x[1], x[2], vec![0, 1, 1, 0], 2),
        ),
        case("gather_rows", vec![r(&[4, 3], rng)], |g, x| g.gather_rows(x[0], vec![2, 0, 2])),
        case("slice_cols", vec![r(&[3, 5], rng)], |g, x| g.slice_cols(x[0], 1, 3)),
        case("reshape", vec![r(&[2, 6], rng)], |g, x| {
            let y = g.reshape(x[0], &[3, 4])?;
            Ok(g.gelu(y))
        }),
        case(
            "kron_gate",
            vec![r(&[3, 3], rng), r(&[3, 4], rng), r(&[9, 4], rng)],
            |g, x| g.kron_gate(x[0], x[1], x[2], 0.5),
        ),
        case("topk_renormalize", vec![positive(&[3, 5], rng)], |g, x| g.topk_renormalize(x[0], 2)),
        case("softmax_topk", vec![r(&[4, 4], rng)], |g, x| {
            let p = g.softmax(x[0], 1)?;
            g.topk_renormalize(p, 3)
        }),
        case(
            "combine",
            vec![r(&[2, 3], rng), r(&[3, 3], rng), positive(&[4, 2], rng)],
            |g, x| {
                let parts = vec![
                    ExpertRows {
                        expert: 0,
                        rows: x[0],
                        tokens: vec![1, 3],
                    },
                    ExpertRows {
                        expert: 1,
                        rows: x[1],
                        tokens: vec![0, 1, 2],
                    },
                ];
                g.combine(parts, x[2])
            },
        ),
        case("mse", vec![r(&[3, 2], rng), r(&[3, 2], rng)], |g, x| g.mse(x[0], x[1])),
        case("sum", vec![r(&[3, 2], rng)], |g, x| Ok(g.sum(x[0]))),
        case(
            "multi_head_self_attention",
            vec![
                r(&[2, 3, 4], rng),
                r(&[4, 4], rng),
                r(&[4], rng),
                r(&[4, 4], rng),
                r(&[4], rng),
                r(&[4, 4], rng),
                r(&[4], rng),
                r(&[4, 4], rng),
                r(&[4], rng),
            ],
            |g, x| {
                let lin = |i: usize| LinearNodes { w: x[i], b: x[i + 1] };
                let p = crate::nncore::AttentionNodes {
                    q: lin(1),
                    k: lin(3),
                    v: lin(5),
                    o: lin(7),
                };
                multi_head_self_attention(g, x[0], &p, 2)
            },
        ),
        case(
            "lstm",
            vec![r(&[2, 4, 1], rng), r(&[1, 12], rng), r(&[3, 12], rng), r(&[12], rng), r(&[3, 2], rng), r(&[2], rng)],
            |g, x| {
                let p = LstmNodes {
                    w_ih: x[1],
                    w_hh: x[2],
                    bias: x[3],
                    head: LinearNodes { w: x[4], b: x[5] },
                };
                lstm_forward(g, x[0], &p, 3)
            },
        ),
    ];
    cases.push(GradCase {
        name: "dropout_train",
        inputs: vec![r(&[4, 5], rng)],
        mode: Mode::Train,
        f: Box::new(|g, x| g.dropout(x[0], 0.3, &mut DropoutRng::new(11))),
    });
    cases
}

fn toy_config(router: RouterKind, seed: u64) -> GateTsConfig {
    GateTsConfig {
        context: 6,
        horizon: 2,
        d_model: 4,
        n_heads: 2,
        n_experts: 3,
        active: 2,
        ffn_width: 5,
        dropout: 0.1,
        router,
        seed,
        ..Default::default()
    }
}

/// Smallest gap between the k-th and (k+1)-th router probability over
/// the tokens that feed the forecast head.
fn readout_margin(model: &Model, x: &Tensor) -> Result<f64> {
    let (_, routing) = model.predict(x)?;
    let Some(r) = routing else { return Ok(f64::INFINITY) };
    let t = x.shape()[1];
    let mut worst = f64::INFINITY;
    for b in 0..x.shape()[0] {
        let mut p = r.probs_for(b * t + t - 1).to_vec();
        if r.k == r.experts {
            continue;
        }
        p.sort_by(|a, b| b.total_cmp(a));
        worst = worst.min(p[r.k - 1] - p[r.k]);
    }
    Ok(worst)
}

/// Top-k selection is piecewise constant; a finite-difference step across a
/// near tie measures the jump, not the gradient. Resample until every
/// readout token has a clear margin.
fn away_from_ties(model: &Model, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    loop {
        let x = random_tensor(&[2, model.config().context], rng);
        if readout_margin(model, &x)? >= 1e-4 {
            return Ok(x);
        }
    }
}

/// Gradient cases for model blocks; parameters and block input are all
/// checked.
fn model_cases(seed: u64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    for (name, router) in [
        ("model_attention_router", RouterKind::Attention),
        ("model_hmm_router", RouterKind::Hmm),
        ("model_classic_router", RouterKind::Classic),
    ] {
        let model = Model::new(toy_config(router, seed))?;
        let x = away_from_ties(&model, rng)?;
        let y = random_tensor(&[2, 2], rng);
        let inputs = model.params().tensors().to_vec();
        cases.push(case(name, inputs, move |g, ids| {
            let out = model.forward_with(g, ids, &x, &mut DropoutRng::new(0), ExpertEval::Readout)?;
            let t = g.constant(&y);
            g.mse(out.forecast, t)
        }));
    }

    let block = |name: &'static str, cfg: GateTsConfig, input: Tensor, f: fn(&mut Graph, &crate::moe::GateTsNodes, NodeId) -> Result<NodeId>| -> Result<GradCase> {
        let model = Model::new(cfg)?;
        let n = model.params().len();
        let mut inputs = model.params().tensors().to_vec();
        inputs.push(input);
        Ok(case(name, inputs, move |g, ids| {
            let nodes = model.gatets_nodes(&ids[..n]).expect("GateTS layout");
            f(g, &nodes, ids[n])
        }))
    };
    let small = |t, h, d, heads| GateTsConfig {
        context: t,
        horizon: h,
        d_model: d,
        n_heads: heads,
        n_experts: 2,
        active: 1,
        ffn_width: 3,
        router: RouterKind::Classic,
        seed,
        ..Default::default()
    };
    cases.push(block("embed_inputs", small(4, 1, 3, 1), random_tensor(&[2, 4], rng), |g, n, x| {
        embed_inputs(g, n, x)
    })?);
    cases.push(block("prepare_block", small(3, 1, 4, 2), random_tensor(&[1, 3, 4], rng), |g, n, h| {
        prepare_block(g, n, h, 2, 0.1, &mut DropoutRng::new(0))
    })?);
    cases.push(block("expert_block", small(3, 1, 4, 2), random_tensor(&[2, 3, 4], rng), |g, n, h| {
        expert_forward(g, n, h, 1, 2, 0.1, &mut DropoutRng::new(0))
    })?);
    cases.push(block("forecast_head", small(3, 3, 4, 2), random_tensor(&[2, 3, 4], rng), forecast_head)?);
    Ok(cases)
}

/// Finite-difference check of every op and model block.
pub fn gradient_suite(opts: SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = op_cases(&mut rng);
    cases.extend(model_cases(opts.seed, &mut rng)?);
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let report = check_gradients(
            &c.inputs,
            &c.f,
            GradCheckOptions {
                mode: c.mode,
                projection_seed: opts.seed ^ 0x9e37,
                perturb: opts.perturb,
                ..Default::default()
            },
        )?;
        let worst = report.max_rel_error();
        out.push(CheckResult {
            name: format!("grad/{}", c.name),
            passed: worst < GRAD_TOLERANCE,
            value: worst,
            tolerance: GRAD_TOLERANCE,
        });
    }
    Ok(out)
}

/// Kronecker and bilinear gate paths on random small configs.
pub fn gate_equivalence(seed: u64, configs: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let d = rng.random_range(1..=8);
        let e = rng.random_range(1..=8);
        let p = AttentionGateParams::random(d, e, &mut rng);
        let x = random_tensor(&[rng.random_range(1..=4), d], &mut rng);
        let a = attention_gate_scores_kron(&x, &p)?;
        let b = attention_gate_scores_bilinear(&x, &p)?;
        for (u, v) in a.data().iter().zip(b.data()) {
            worst = worst.max((u - v).abs());
        }
    }
    Ok(CheckResult {
        name: "gate/kron_vs_bilinear".into(),
        passed: worst <= GATE_TOLERANCE,
        value: worst,
        tolerance: GATE_TOLERANCE,
    })
}

/// Top-k on random probability rows: exactly k survivors, unit sum and
/// preserved survivor ratios. Returns the worst deviation.
pub fn topk_contract(seed: u64, rows: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut passed = true;
    for _ in 0..rows {
        let e = rng.random_range(1..=8);
        let raw: Vec<f64> = (0..e).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p = Tensor::new(&[1, e], raw.iter().map(|v| v / total).collect())?;
        for k in 1..=e {
            let d = crate::gating::topk_renormalize(&p, k)?;
            let nz: Vec<usize> = (0..e).filter(|&i| d.weights[i] != 0.0).collect();
            passed &= nz.len() == k;
            worst = worst.max((d.weights.iter().sum::<f64>() - 1.0).abs());
            for &i in &nz {
                for &j in &nz {
                    let ratio = d.weights[i] / d.weights[j] - p.data()[i] / p.data()[j];
                    worst = worst.max(ratio.abs() / (p.data()[i] / p.data()[j]).max(1.0));
                }
            }
        }
    }
    Ok(CheckResult {
        name: "routing/topk_contract".into(),
        passed: passed && worst < 1e-9,
        value: worst,
        tolerance: 1e-9,
    })
}

/// Sparse expert evaluation against the all-experts reference.
pub fn sparse_dense(seed: u64, configs: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..configs {
        let heads = rng.random_range(1..=2);
        let e = rng.random_range(1..=5);
        let cfg = GateTsConfig {
            context: rng.random_range(2..=10),
            horizon: rng.random_range(1..=4),
            d_model: 2 * heads * rng.random_range(1..=3),
            n_heads: heads,
            n_experts: e,
            active: rng.random_range(1..=e),
            ffn_width: rng.random_range(2..=8),
            router: RouterKind::ALL[i % 3],
            seed: rng.random(),
            ..Default::default()
        };
        let context = cfg.context;
        let model = Model::new(cfg)?;
        let x = random_tensor(&[rng.random_range(1..=4), context], &mut rng);
        let run = |eval| -> Result<Vec<f64>> {
            let mut g = Graph::new(Mode::Eval);
            let bound = model.params().bind(&mut g);
            let out = model.forward_with(&mut g, &bound, &x, &mut DropoutRng::new(0), eval)?;
            Ok(g.value(out.forecast).to_vec())
        };
        let dense = run(ExpertEval::Dense)?;
        for eval in [ExpertEval::Readout, ExpertEval::AllTokens] {
            for (a, b) in run(eval)?.iter().zip(&dense) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(CheckResult {
        name: "moe/sparse_vs_dense".into(),
        passed: worst <= SPARSE_TOLERANCE,
        value: worst,
        tolerance: SPARSE_TOLERANCE,
    })
}

/// Everything above, in a fixed order.
pub fn run_all(opts: SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = gradient_suite(opts)?;
    out.push(gate_equivalence(opts.seed, 100)?);
    out.push(topk_contract(opts.seed, 1000)?);
    out.push(sparse_dense(opts.seed, 10)?);
    Ok(out)
}
