//! The GateTS forward pass.
//!
//! ```text
//! x[B,T] ─ input projection + positional table ─ Prepare Block ─┬─ router ─ softmax ─ top-k
//!                                                               └─ experts (routed tokens) ─ weighted sum
//!        ─ dropout ─ layer norm ─ last token ─ head ─ ŷ[B,H]
//! ```
//!
//! The Prepare Block and every expert are post-norm blocks with residual
//! connections. The head reads only the last position, so by default experts
//! are evaluated for the last token of each sequence only; the routing trace
//! still covers every position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Arch, GateTsConfig};
use crate::error::{Error, Result};
use crate::gating::{route, RouterLayout, RouterNodes, RoutingDecision};
use crate::nncore::layers::{affine, attend_rows, multi_head_self_attention, norm};
use crate::nncore::{
    derive_seed, lstm_forward, AttentionNodes, DropoutRng, ExpertRows, Graph, LinearNodes,
    LstmLayout, Mode, NodeId, NormNodes, ParamStore, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LinearIdx {
    w: usize,
    b: usize,
}

impl LinearIdx {
    fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.push(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng)),
            b: store.push(format!("{name}.b"), Tensor::uniform(&[fan_out], bound, rng)),
        }
    }

    fn nodes(&self, bound: &[NodeId]) -> LinearNodes {
        LinearNodes {
            w: bound[self.w],
            b: bound[self.b],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

impl NormIdx {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.push(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.push(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn nodes(&self, bound: &[NodeId]) -> NormNodes {
        NormNodes {
            gamma: bound[self.gamma],
            beta: bound[self.beta],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AttentionIdx {
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
}

impl AttentionIdx {
    fn init(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: LinearIdx::init(store, &format!("{name}.q"), d, d, rng),
            k: LinearIdx::init(store, &format!("{name}.k"), d, d, rng),
            v: LinearIdx::init(store, &format!("{name}.v"), d, d, rng),
            o: LinearIdx::init(store, &format!("{name}.o"), d, d, rng),
        }
    }

    fn nodes(&self, bound: &[NodeId]) -> AttentionNodes {
        AttentionNodes {
            q: self.q.nodes(bound),
            k: self.k.nodes(bound),
            v: self.v.nodes(bound),
            o: self.o.nodes(bound),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ExpertIdx {
    attn: AttentionIdx,
    norm1: NormIdx,
    ff1: LinearIdx,
    ff2: LinearIdx,
    norm2: NormIdx,
}

/// Node handles of one expert block.
#[derive(Debug, Clone, Copy)]
pub struct ExpertNodes {
    pub attn: AttentionNodes,
    pub norm1: NormNodes,
    pub ff1: LinearNodes,
    pub ff2: LinearNodes,
    pub norm2: NormNodes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateTsLayout {
    input: LinearIdx,
    pos: usize,
    prep_attn: AttentionIdx,
    prep_norm: NormIdx,
    router: RouterLayout,
    experts: Vec<ExpertIdx>,
    combine_norm: NormIdx,
    head: LinearIdx,
}

/// Node handles for a bound GateTS parameter set.
#[derive(Debug, Clone)]
pub struct GateTsNodes {
    pub input: LinearNodes,
    pub pos: NodeId,
    pub prep_attn: AttentionNodes,
    pub prep_norm: NormNodes,
    pub router: RouterNodes,
    pub experts: Vec<ExpertNodes>,
    pub combine_norm: NormNodes,
    pub head: LinearNodes,
}

impl GateTsLayout {
    fn init(cfg: &GateTsConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let input = LinearIdx::init(store, "input", 1, d, rng);
        let pos = store.push("pos", Tensor::normal(&[cfg.context, d], 0.02, rng));
        let prep_attn = AttentionIdx::init(store, "prepare.attn", d, rng);
        let prep_norm = NormIdx::init(store, "prepare.norm", d);
        let router = RouterLayout::init(store, cfg.router, d, cfg.n_experts, rng);
        let experts = (0..cfg.n_experts)
            .map(|e| {
                let name = format!("experts.{e}");
                ExpertIdx {
                    attn: AttentionIdx::init(store, &format!("{name}.attn"), d, rng),
                    norm1: NormIdx::init(store, &format!("{name}.norm1"), d),
                    ff1: LinearIdx::init(store, &format!("{name}.ff1"), d, cfg.ffn_width, rng),
                    ff2: LinearIdx::init(store, &format!("{name}.ff2"), cfg.ffn_width, d, rng),
                    norm2: NormIdx::init(store, &format!("{name}.norm2"), d),
                }
            })
            .collect();
        let combine_norm = NormIdx::init(store, "combine.norm", d);
        let head = LinearIdx::init(store, "head", d, cfg.horizon, rng);
        Self {
            input,
            pos,
            prep_attn,
            prep_norm,
            router,
            experts,
            combine_norm,
            head,
        }
    }

    pub fn nodes(&self, bound: &[NodeId]) -> GateTsNodes {
        GateTsNodes {
            input: self.input.nodes(bound),
            pos: bound[self.pos],
            prep_attn: self.prep_attn.nodes(bound),
            prep_norm: self.prep_norm.nodes(bound),
            router: self.router.nodes(bound),
            experts: self
                .experts
                .iter()
                .map(|e| ExpertNodes {
                    attn: e.attn.nodes(bound),
                    norm1: e.norm1.nodes(bound),
                    ff1: e.ff1.nodes(bound),
                    ff2: e.ff2.nodes(bound),
                    norm2: e.norm2.nodes(bound),
                })
                .collect(),
            combine_norm: self.combine_norm.nodes(bound),
            head: self.head.nodes(bound),
        }
    }
}

/// Which tokens the experts are evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpertEval {
    /// Routed experts at the last position of each sequence (the only
    /// position the head reads).
    #[default]
    Readout,
    /// Routed experts at every position.
    AllTokens,
    /// Every expert at every position, weighted by the sparse routing
    /// weights. Reference path for the sparse variants.
    Dense,
}

/// Scalar-per-step input `[B, T]` → `[B, T, d]`: affine lift plus the
/// positional row of each step.
pub fn embed_inputs(g: &mut Graph, n: &GateTsNodes, x: NodeId) -> Result<NodeId> {
    let xs = g.shape(x).to_vec();
    let pos = g.shape(n.pos).to_vec();
    if xs.len() != 2 || xs[1] != pos[0] {
        return Err(Error::Shape {
            op: "embed_inputs (expected [batch, context])",
            lhs: xs,
            rhs: vec![0, pos[0]],
        });
    }
    let x3 = g.reshape(x, &[xs[0], xs[1], 1])?;
    let h = affine(g, x3, n.input)?;
    g.add_broadcast(h, n.pos)
}

/// Self-attention → dropout → residual → layer norm.
pub fn prepare_block(
    g: &mut Graph,
    n: &GateTsNodes,
    h0: NodeId,
    heads: usize,
    p_drop: f64,
    rng: &mut DropoutRng,
) -> Result<NodeId> {
    let a = multi_head_self_attention(g, h0, &n.prep_attn, heads)?;
    let a = g.dropout(a, p_drop, rng)?;
    let r = g.add(h0, a)?;
    norm(g, r, n.prep_norm)
}

/// Expert block evaluated at the flat token positions `tokens` (indices into
/// `B·T`, ascending) of `h: [B, T, d]`. Keys and values cover every position
/// of each touched sequence, so each row equals the corresponding row of a
/// dense evaluation. Returns `[tokens.len(), d]`.
pub fn expert_rows(
    g: &mut Graph,
    expert: &ExpertNodes,
    h: NodeId,
    tokens: &[usize],
    heads: usize,
    p_drop: f64,
    rng: &mut DropoutRng,
) -> Result<NodeId> {
    let s = g.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("expert input", &s, &[0, 0, 0]));
    }
    let (b, t_len, d) = (s[0], s[1], s[2]);
    let mut seqs: Vec<usize> = tokens.iter().map(|&tok| tok / t_len).collect();
    seqs.dedup();
    let row_seq: Vec<usize> = tokens
        .iter()
        .map(|&tok| seqs.binary_search(&(tok / t_len)).expect("tokens are ascending"))
        .collect();
    let seq_node = if seqs.len() == b {
        h
    } else {
        let rows: Vec<usize> = seqs.iter().flat_map(|&sq| sq * t_len..(sq + 1) * t_len).collect();
        let gathered = g.gather_rows(h, rows)?;
        g.reshape(gathered, &[seqs.len(), t_len, d])?
    };
    let x = g.gather_rows(h, tokens.to_vec())?;
    let a = attend_rows(g, seq_node, x, row_seq, &expert.attn, heads)?;
    let a = g.dropout(a, p_drop, rng)?;
    let r = g.add(x, a)?;
    let h1 = norm(g, r, expert.norm1)?;
    let f = affine(g, h1, expert.ff1)?;
    let f = g.gelu(f);
    let f = affine(g, f, expert.ff2)?;
    let f = g.dropout(f, p_drop, rng)?;
    let r = g.add(h1, f)?;
    norm(g, r, expert.norm2)
}

/// Expert `e` densely over all tokens: `[B, T, d]` → `[B, T, d]`.
pub fn expert_forward(
    g: &mut Graph,
    n: &GateTsNodes,
    h: NodeId,
    e: usize,
    heads: usize,
    p_drop: f64,
    rng: &mut DropoutRng,
) -> Result<NodeId> {
    let expert = n
        .experts
        .get(e)
        .ok_or_else(|| Error::Config(format!("expert {e} out of range (E = {})", n.experts.len())))?;
    let shape = g.shape(h).to_vec();
    let all: Vec<usize> = (0..shape.iter().take(2).product()).collect();
    let rows = expert_rows(g, expert, h, &all, heads, p_drop, rng)?;
    g.reshape(rows, &shape)
}

/// Weighted sum of expert rows by routing weights `[N, E]`, then dropout and
/// layer norm. Returns `[N, d]`.
pub fn combine_experts(
    g: &mut Graph,
    n: &GateTsNodes,
    parts: Vec<ExpertRows>,
    weights: NodeId,
    p_drop: f64,
    rng: &mut DropoutRng,
) -> Result<NodeId> {
    let c = g.combine(parts, weights)?;
    let c = g.dropout(c, p_drop, rng)?;
    norm(g, c, n.combine_norm)
}

/// Affine readout of the last position: `[B, T, d]` (or `[B, d]`) → `[B, H]`.
pub fn forecast_head(g: &mut Graph, n: &GateTsNodes, hc: NodeId) -> Result<NodeId> {
    let s = g.shape(hc).to_vec();
    let last = match s.len() {
        2 => hc,
        3 => {
            let (b, t) = (s[0], s[1]);
            g.gather_rows(hc, (0..b).map(|i| i * t + t - 1).collect())?
        }
        _ => return Err(Error::shape("forecast_head", &s, &[0, 0, 0])),
    };
    affine(g, last, n.head)
}

/// Forward graph handles plus the routing trace.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, H]` forecast in normalised units.
    pub forecast: NodeId,
    pub routing: Option<RoutingDecision>,
}

fn gatets_forward(
    cfg: &GateTsConfig,
    n: &GateTsNodes,
    g: &mut Graph,
    x: NodeId,
    rng: &mut DropoutRng,
    eval: ExpertEval,
) -> Result<ModelOutput> {
    let (heads, p) = (cfg.n_heads, cfg.dropout);
    let h0 = embed_inputs(g, n, x)?;
    let h = prepare_block(g, n, h0, heads, p, rng)?;
    let scores = n.router.scores(g, h)?;
    let (probs, weights) = route(g, scores, cfg.active)?;
    let decision = RoutingDecision::from_graph(g, probs, weights);
    let (b, t_len) = (g.shape(x)[0], cfg.context);
    let n_tokens = b * t_len;

    let routed_to = |e: usize, candidates: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
        candidates.filter(|&tok| decision.selected_for(tok).contains(&e)).collect()
    };

    let forecast = match eval {
        ExpertEval::Readout => {
            let readout: Vec<usize> = (0..b).map(|i| i * t_len + t_len - 1).collect();
            let w = g.gather_rows(weights, readout.clone())?;
            let mut parts = Vec::new();
            for (e, expert) in n.experts.iter().enumerate() {
                let tokens = routed_to(e, &mut readout.iter().copied());
                if tokens.is_empty() {
                    continue;
                }
                let rows = expert_rows(g, expert, h, &tokens, heads, p, rng)?;
                let local = tokens.iter().map(|&tok| tok / t_len).collect();
                parts.push(ExpertRows {
                    expert: e,
                    rows,
                    tokens: local,
                });
            }
            let c = combine_experts(g, n, parts, w, p, rng)?;
            forecast_head(g, n, c)?
        }
        ExpertEval::AllTokens | ExpertEval::Dense => {
            let w = g.reshape(weights, &[n_tokens, cfg.n_experts])?;
            let mut parts = Vec::new();
            for (e, expert) in n.experts.iter().enumerate() {
                let tokens = if eval == ExpertEval::Dense {
                    (0..n_tokens).collect()
                } else {
                    routed_to(e, &mut (0..n_tokens))
                };
                if tokens.is_empty() {
                    continue;
                }
                let rows = expert_rows(g, expert, h, &tokens, heads, p, rng)?;
                parts.push(ExpertRows { expert: e, rows, tokens });
            }
            let c = combine_experts(g, n, parts, w, p, rng)?;
            let c = g.reshape(c, &[b, t_len, cfg.d_model])?;
            forecast_head(g, n, c)?
        }
    };
    Ok(ModelOutput {
        forecast,
        routing: Some(decision),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ModelLayout {
    Gatets(GateTsLayout),
    Lstm(LstmLayout),
}

/// A forecaster (GateTS or the LSTM baseline) with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: GateTsConfig,
    params: ParamStore,
    layout: ModelLayout,
    expert_eval: ExpertEval,
}

impl Model {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: GateTsConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
        let mut params = ParamStore::new();
        let layout = match config.arch {
            Arch::Gatets => ModelLayout::Gatets(GateTsLayout::init(&config, &mut params, &mut rng)),
            Arch::Lstm => ModelLayout::Lstm(LstmLayout::init(
                &mut params,
                config.lstm_hidden,
                config.horizon,
                &mut rng,
            )),
        };
        Ok(Self {
            config,
            params,
            layout,
            expert_eval: ExpertEval::default(),
        })
    }

    /// Model for `config` carrying the given parameter values; names and
    /// shapes must match what `config` implies.
    pub fn from_params(config: GateTsConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &GateTsConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn expert_eval(&self) -> ExpertEval {
        self.expert_eval
    }

    pub fn set_expert_eval(&mut self, eval: ExpertEval) {
        self.expert_eval = eval;
    }

    /// Bind parameters for the GateTS sub-ops; `None` for the LSTM.
    pub fn gatets_nodes(&self, bound: &[NodeId]) -> Option<GateTsNodes> {
        match &self.layout {
            ModelLayout::Gatets(l) => Some(l.nodes(bound)),
            ModelLayout::Lstm(_) => None,
        }
    }

    /// Build the forward graph for a `[B, T]` batch of normalised contexts.
    pub fn forward(&self, g: &mut Graph, bound: &[NodeId], x: &Tensor, rng: &mut DropoutRng) -> Result<ModelOutput> {
        self.forward_with(g, bound, x, rng, self.expert_eval)
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        x: &Tensor,
        rng: &mut DropoutRng,
        eval: ExpertEval,
    ) -> Result<ModelOutput> {
        if !x.is_finite() {
            return Err(Error::Numeric("model input contains non-finite values".into()));
        }
        if x.shape().len() != 2 || x.shape()[1] != self.config.context {
            return Err(Error::Shape {
                op: "model input (expected [batch, context])",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.config.context],
            });
        }
        let xi = g.constant(x);
        match &self.layout {
            ModelLayout::Gatets(l) => gatets_forward(&self.config, &l.nodes(bound), g, xi, rng, eval),
            ModelLayout::Lstm(l) => {
                let (b, t) = (x.shape()[0], x.shape()[1]);
                let x3 = g.reshape(xi, &[b, t, 1])?;
                let forecast = lstm_forward(g, x3, &l.nodes(bound), self.config.lstm_hidden)?;
                Ok(ModelOutput {
                    forecast,
                    routing: None,
                })
            }
        }
    }

    /// Eval-mode forecast `[B, H]` and routing trace.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Option<RoutingDecision>)> {
        let mut g = Graph::new(Mode::Eval);
        let bound = self.params.bind(&mut g);
        let mut rng = DropoutRng::new(0);
        let out = self.forward(&mut g, &bound, x, &mut rng)?;
        Ok((g.tensor(out.forecast), out.routing))
    }

    /// `(total, active)` by walking the parameter store.
    pub fn enumerate_parameters(&self) -> (usize, usize) {
        let total = self.params.numel();
        if self.config.arch == Arch::Lstm {
            return (total, total);
        }
        let k = self.config.active;
        let active = self
            .params
            .iter()
            .filter(|(name, _)| match name.strip_prefix("experts.") {
                Some(rest) => {
                    let e: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                    e < k
                }
                None => true,
            })
            .map(|(_, t)| t.numel())
            .sum();
        (total, active)
    }
}

/// Parameters of one expert block.
pub fn expert_parameter_count(d: usize, ffn: usize) -> usize {
    // attention 4(d²+d), two norms 4d, feed-forward d·f+f + f·d+d
    4 * d * d + 4 * d + 4 * d + 2 * d * ffn + ffn + d
}

/// `(total, active)` learnable counts; active covers the shared layers plus
/// `k` experts.
pub fn count_parameters(cfg: &GateTsConfig) -> (usize, usize) {
    if cfg.arch == Arch::Lstm {
        let n = LstmLayout::parameter_count(cfg.lstm_hidden, cfg.horizon);
        return (n, n);
    }
    let d = cfg.d_model;
    let shared = 2 * d // input projection
        + cfg.context * d // positional table
        + 4 * d * d + 4 * d + 2 * d // prepare block
        + RouterLayout::parameter_count(cfg.router, d, cfg.n_experts)
        + 2 * d // combine norm
        + d * cfg.horizon + cfg.horizon; // head
    let expert = expert_parameter_count(d, cfg.ffn_width);
    (shared + cfg.n_experts * expert, shared + cfg.active * expert)
}
