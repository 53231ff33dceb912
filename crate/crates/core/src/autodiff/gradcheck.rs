//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{BoundParams, ParamStore};
use super::tape::{AttentionLayout, Fault, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in parameter-name order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_error() < threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar program `f` with central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`, element by element.
pub fn grad_check<F>(f: F, params: &ParamStore, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    grad_check_with_fault(f, params, epsilon, None)
}

pub fn grad_check_with_fault<F>(
    f: F,
    params: &ParamStore,
    epsilon: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    assert!(epsilon > 0.0 && epsilon <= 1e-3, "epsilon must be in (0, 1e-3]");
    let mut tape = fault.map(Tape::with_fault).unwrap_or_default();
    let bound = params.bind(&mut tape);
    let root = f(&mut tape, &bound)?;
    let analytic = bound.named_grads(&tape.backward(root)?);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let r = f(&mut t, &b)?;
        Ok(t.value(r).item())
    };

    let mut per_param = Vec::new();
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let base = tensor.to_vec();
        let grad = analytic[name].data();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + epsilon;
            probe.set(name, Tensor::new(tensor.shape(), shifted.clone())?)?;
            let up = eval(&probe)?;
            shifted[i] = base[i] - epsilon;
            probe.set(name, Tensor::new(tensor.shape(), shifted)?)?;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad[i], numeric));
        }
        probe.set(name, tensor.clone())?;
        per_param.push((name.to_string(), worst));
    }
    Ok(GradCheckReport { per_param })
}

/// A loss built on a tape from bound parameters.
pub type LossProgram = Box<dyn Fn(&mut Tape, &BoundParams) -> Result<Var>>;

/// One named finite-difference case in the kernel suite.
pub struct KernelCase {
    pub name: &'static str,
    pub params: ParamStore,
    pub program: LossProgram,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    // Keep entries away from zero so ReLU kinks stay outside ±ε.
    Tensor::from_fn(shape, |_| {
        let x: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            x
        } else {
            -x
        }
    })
}

/// Weighted sum `Σ wᵢ·yᵢ` with fixed random weights, so every output
/// element contributes a distinct, order-one gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Finite-difference cases covering every differentiable kernel on random
/// tensors with extents ≤ 8.
pub fn kernel_cases(seed: u64) -> Vec<KernelCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut case = |name: &'static str,
                    shapes: &[(&str, &[usize])],
                    rng: &mut ChaCha8Rng,
                    program: LossProgram| {
        let mut params = ParamStore::new();
        for (n, s) in shapes {
            params.insert(*n, random_tensor(rng, s));
        }
        cases.push(KernelCase {
            name,
            params,
            program,
        });
    };

    case("matmul", &[("a", &[3, 5]), ("b", &[5, 4])], &mut rng, Box::new(|t, p| {
        let y = t.matmul(p.var("a"), p.var("b"))?;
        weighted_sum(t, y, 1)
    }));
    case("matmul_nt", &[("a", &[4, 6]), ("b", &[7, 6])], &mut rng, Box::new(|t, p| {
        let y = t.matmul_nt(p.var("a"), p.var("b"))?;
        weighted_sum(t, y, 2)
    }));
    case("add", &[("a", &[2, 3]), ("b", &[2, 3])], &mut rng, Box::new(|t, p| {
        let y = t.add(p.var("a"), p.var("b"))?;
        weighted_sum(t, y, 3)
    }));
    case("add_bias", &[("a", &[4, 3]), ("b", &[3])], &mut rng, Box::new(|t, p| {
        let y = t.add_bias(p.var("a"), p.var("b"))?;
        weighted_sum(t, y, 4)
    }));
    case("mul", &[("a", &[3, 3]), ("b", &[3, 3])], &mut rng, Box::new(|t, p| {
        let y = t.mul(p.var("a"), p.var("b"))?;
        weighted_sum(t, y, 5)
    }));
    case("scale", &[("a", &[2, 5])], &mut rng, Box::new(|t, p| {
        let y = t.scale(p.var("a"), -1.7);
        weighted_sum(t, y, 6)
    }));
    case("relu", &[("a", &[4, 4])], &mut rng, Box::new(|t, p| {
        let y = t.relu(p.var("a"));
        weighted_sum(t, y, 7)
    }));
    case("softmax_lastdim", &[("a", &[3, 6])], &mut rng, Box::new(|t, p| {
        let y = t.softmax_lastdim(p.var("a"));
        weighted_sum(t, y, 8)
    }));
    case(
        "layer_norm_lastdim",
        &[("x", &[3, 5]), ("gain", &[5]), ("bias", &[5])],
        &mut rng,
        Box::new(|t, p| {
            let y = t.layer_norm_lastdim(p.var("x"), p.var("gain"), p.var("bias"))?;
            weighted_sum(t, y, 9)
        }),
    );
    case("embedding_lookup", &[("table", &[6, 4])], &mut rng, Box::new(|t, p| {
        let y = t.embedding_lookup(p.var("table"), &[0, 3, 3, 5, 1])?;
        weighted_sum(t, y, 10)
    }));
    case("concat", &[("a", &[2, 3]), ("b", &[2, 2])], &mut rng, Box::new(|t, p| {
        let y = t.concat(&[p.var("a"), p.var("b"), p.var("a")], 1)?;
        weighted_sum(t, y, 11)
    }));
    case("slice", &[("a", &[5, 4])], &mut rng, Box::new(|t, p| {
        let y = t.slice(p.var("a"), 0, 1, 3)?;
        let z = t.slice(y, 1, 2, 2)?;
        weighted_sum(t, z, 12)
    }));
    case("transpose", &[("a", &[3, 4])], &mut rng, Box::new(|t, p| {
        let y = t.transpose(p.var("a"))?;
        weighted_sum(t, y, 13)
    }));
    case(
        "attention",
        &[("q", &[2 * 3, 8]), ("k", &[2 * 4, 8]), ("v", &[2 * 4, 8])],
        &mut rng,
        Box::new(|t, p| {
            let layout = Arc::new(AttentionLayout {
                batch: 2,
                q_len: 3,
                k_len: 4,
                heads: 2,
                causal: false,
                key_valid: vec![true, true, true, true, true, true, false, false],
            });
            let y = t.attention(p.var("q"), p.var("k"), p.var("v"), layout)?;
            weighted_sum(t, y, 14)
        }),
    );
    case(
        "attention_causal",
        &[("q", &[2 * 4, 6]), ("k", &[2 * 4, 6]), ("v", &[2 * 4, 6])],
        &mut rng,
        Box::new(|t, p| {
            let layout = Arc::new(AttentionLayout {
                batch: 2,
                q_len: 4,
                k_len: 4,
                heads: 3,
                causal: true,
                key_valid: vec![true; 8],
            });
            let y = t.attention(p.var("q"), p.var("k"), p.var("v"), layout)?;
            weighted_sum(t, y, 15)
        }),
    );
    case("cross_entropy_masked", &[("logits", &[4, 5])], &mut rng, Box::new(|t, p| {
        t.cross_entropy_masked(p.var("logits"), &[1, 0, 4, 2], &[true, false, true, true])
    }));
    cases
}
