//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central differences at step 1e-5 carry round-off near 1e-10; gradients
/// smaller than this floor are compared in absolute terms.
pub const GRAD_NORM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub mode: Mode,
    /// Seed of the fixed projection that reduces a non-scalar output to a
    /// scalar objective.
    pub projection_seed: u64,
    /// Added to every analytic gradient entry; lets callers confirm a
    /// corrupted gradient is caught.
    pub perturb: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            mode: Mode::Eval,
            projection_seed: 0x5eed,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input
    /// (the denominator is floored at `GRAD_NORM_FLOOR`).
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn objective<F>(f: &F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new(opts.mode);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &ids)?;
    let n = g.value(out).len();
    let loss = if n == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.projection_seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.dot_const(out, w)?
    };
    Ok((g, ids, loss))
}

/// Compare reverse-mode gradients of `f` with central differences for every
/// element of every input. `f` must be deterministic: it is re-run for each
/// perturbation.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (mut g, ids, loss) = objective(&f, inputs, &opts)?;
    g.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            let mut grad = g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            for v in &mut grad {
                *v += opts.perturb;
            }
            grad
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let (g, _, loss) = objective(&f, inputs, &opts)?;
        Ok(g.value(loss)[0])
    };

    let mut work = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("finite difference for input {i}[{j}] is {numeric}")));
            }
            diff2 += (a[j] - numeric).powi(2);
            an2 += a[j] * a[j];
            nu2 += numeric * numeric;
        }
        // Floor keeps exactly-zero gradients (e.g. key biases under softmax
        // shift invariance) from turning finite-difference noise into error 1.
        let denom = an2.sqrt().max(nu2.sqrt()).max(GRAD_NORM_FLOOR);
        let err = diff2.sqrt() / denom;
        rel_errors.push(err);
    }
    Ok(GradCheckReport { rel_errors })
}

/// Uniform(-1, 1) tensor from a seeded generator, for checks and tests.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}
