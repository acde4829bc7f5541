//! Single-layer LSTM with an affine forecast head.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::layers::{affine, LinearNodes};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Node handles for [`lstm_forward`]. Gate columns are ordered
/// input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub bias: NodeId,
    pub head: LinearNodes,
}

/// Parameter indices of an LSTM forecaster inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmLayout {
    pub w_ih: usize,
    pub w_hh: usize,
    pub bias: usize,
    pub head_w: usize,
    pub head_b: usize,
}

impl LstmLayout {
    /// Register freshly initialised parameters: uniform(±1/√fan_in) weights,
    /// forget-gate bias 1.
    pub fn init(store: &mut ParamStore, hidden: usize, horizon: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.push("lstm.w_ih", Tensor::uniform(&[1, 4 * hidden], 1.0, rng));
        let w_hh = store.push("lstm.w_hh", Tensor::uniform(&[hidden, 4 * hidden], bound, rng));
        let mut b = Tensor::uniform(&[4 * hidden], bound, rng);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.push("lstm.bias", b);
        let head_w = store.push("head.w", Tensor::uniform(&[hidden, horizon], bound, rng));
        let head_b = store.push("head.b", Tensor::uniform(&[horizon], bound, rng));
        Self {
            w_ih,
            w_hh,
            bias,
            head_w,
            head_b,
        }
    }

    pub fn nodes(&self, bound: &[NodeId]) -> LstmNodes {
        LstmNodes {
            w_ih: bound[self.w_ih],
            w_hh: bound[self.w_hh],
            bias: bound[self.bias],
            head: LinearNodes {
                w: bound[self.head_w],
                b: bound[self.head_b],
            },
        }
    }

    pub fn parameter_count(hidden: usize, horizon: usize) -> usize {
        4 * hidden * (1 + hidden + 1) + hidden * horizon + horizon
    }
}

/// Run the recurrence over `x: [B, T, 1]` and map the final hidden state to
/// `[B, horizon]`.
pub fn lstm_forward(g: &mut Graph, x: NodeId, p: &LstmNodes, hidden: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::shape("lstm_forward", &s, &[0, 0, 1]));
    }
    if hidden == 0 {
        return Err(Error::Config("LSTM hidden size must be >= 1".into()));
    }
    if g.shape(p.w_hh) != [hidden, 4 * hidden] {
        return Err(Error::shape("lstm_forward recurrent weights", g.shape(p.w_hh), &[hidden, 4 * hidden]));
    }
    let (b, t_len) = (s[0], s[1]);
    let zeros = Tensor::zeros(&[b, hidden]);
    let mut h = g.constant(&zeros);
    let mut c = g.constant(&zeros);
    for t in 0..t_len {
        let xt = g.gather_rows(x, (0..b).map(|i| i * t_len + t).collect())?;
        let zx = g.linear(xt, p.w_ih, Some(p.bias))?;
        let zh = g.linear(h, p.w_hh, None)?;
        let z = g.add(zx, zh)?;
        let i_pre = g.slice_cols(z, 0, hidden)?;
        let f_pre = g.slice_cols(z, hidden, hidden)?;
        let c_pre = g.slice_cols(z, 2 * hidden, hidden)?;
        let o_pre = g.slice_cols(z, 3 * hidden, hidden)?;
        let i_gate = g.sigmoid(i_pre);
        let f_gate = g.sigmoid(f_pre);
        let c_cand = g.tanh(c_pre);
        let o_gate = g.sigmoid(o_pre);
        let keep = g.mul(f_gate, c)?;
        let write = g.mul(i_gate, c_cand)?;
        c = g.add(keep, write)?;
        let c_act = g.tanh(c);
        h = g.mul(o_gate, c_act)?;
    }
    affine(g, h, p.head)
}
