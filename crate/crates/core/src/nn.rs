//! Transformer building blocks shared by the Pilot and Copilot.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{Bound, Mask, ParameterSet, Scalar, Tape, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub(crate) fn init_linear<S: Scalar, R: Rng>(
    params: &mut ParameterSet<S>,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    params.insert(format!("{prefix}.weight"), normal(rng, &[fan_in, fan_out], INIT_STD))?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
}

pub(crate) fn init_zero_linear<S: Scalar>(
    params: &mut ParameterSet<S>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    params.insert(format!("{prefix}.weight"), Tensor::zeros(&[fan_in, fan_out]))?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
}

pub(crate) fn init_layer_norm<S: Scalar>(params: &mut ParameterSet<S>, prefix: &str, d: usize) -> Result<()> {
    params.insert(format!("{prefix}.gamma"), Tensor::filled(&[d], S::one()))?;
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))
}

/// Query/key/value/output projections; keys and values read `kv_dim` inputs.
pub(crate) fn init_attention<S: Scalar, R: Rng>(
    params: &mut ParameterSet<S>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    kv_dim: usize,
) -> Result<()> {
    init_linear(params, rng, &format!("{prefix}.q"), d, d)?;
    init_linear(params, rng, &format!("{prefix}.k"), kv_dim, d)?;
    init_linear(params, rng, &format!("{prefix}.v"), kv_dim, d)?;
    init_linear(params, rng, &format!("{prefix}.o"), d, d)
}

pub(crate) fn init_ffn<S: Scalar, R: Rng>(
    params: &mut ParameterSet<S>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> Result<()> {
    init_linear(params, rng, &format!("{prefix}.up"), d, hidden)?;
    init_linear(params, rng, &format!("{prefix}.down"), hidden, d)
}

pub(crate) fn linear<S: Scalar>(tape: &mut Tape<S>, p: &Bound, prefix: &str, x: Var) -> Var {
    let w = p.get(&format!("{prefix}.weight"));
    let b = p.get(&format!("{prefix}.bias"));
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

pub(crate) fn layer_norm<S: Scalar>(tape: &mut Tape<S>, p: &Bound, prefix: &str, x: Var) -> Var {
    let g = p.get(&format!("{prefix}.gamma"));
    let b = p.get(&format!("{prefix}.beta"));
    tape.layer_norm(x, g, b)
}

pub(crate) fn ffn<S: Scalar>(tape: &mut Tape<S>, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(tape, p, &format!("{prefix}.up"), x);
    let h = tape.gelu(h);
    linear(tape, p, &format!("{prefix}.down"), h)
}

/// Multi-head scaled dot-product attention.
///
/// `q_in` is `[B, T, d]`, `kv_in` is `[B, S, kv_dim]`; `mask` has 1 or `B`
/// groups of shape `[T, S]`. Returns `[B, T, d]`.
pub(crate) fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: &Mask,
) -> Var {
    let qs = tape.shape(q_in).to_vec();
    let ks = tape.shape(kv_in).to_vec();
    let (b, t) = (qs[0], qs[1]);
    let s = ks[1];
    let q = linear(tape, p, &format!("{prefix}.q"), q_in);
    let k = linear(tape, p, &format!("{prefix}.k"), kv_in);
    let v = linear(tape, p, &format!("{prefix}.v"), kv_in);
    let d = tape.shape(q)[2];
    let dh = d / heads;
    let split = |tape: &mut Tape<S>, x: Var, len: usize| {
        let x = tape.reshape(x, &[b, len, heads, dh]);
        let x = tape.transpose12(x);
        tape.reshape(x, &[b * heads, len, dh])
    };
    let q = split(tape, q, t);
    let k = split(tape, k, s);
    let v = split(tape, v, s);
    let scores = tape.bmm(q, k, true);
    let scores = tape.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
    let probs = tape.masked_softmax(scores, mask);
    let ctx = tape.bmm(probs, v, false);
    let ctx = tape.reshape(ctx, &[b, heads, t, dh]);
    let ctx = tape.transpose12(ctx);
    let ctx = tape.reshape(ctx, &[b, t, d]);
    linear(tape, p, &format!("{prefix}.o"), ctx)
}

/// Reduction applied across stacked layer representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
    Sum,
}

impl std::str::FromStr for PoolMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolMode::Mean),
            "max" => Ok(PoolMode::Max),
            "sum" => Ok(PoolMode::Sum),
            other => Err(crate::Error::Config(format!("unknown pool mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Mean => "mean",
            PoolMode::Max => "max",
            PoolMode::Sum => "sum",
        })
    }
}

/// Pools layers `range` of a `[L, n, d]` stack into `[n, d]`.
pub fn pool_layers<S: Scalar>(
    stack: &Tensor<S>,
    range: std::ops::Range<usize>,
    mode: PoolMode,
) -> Result<Tensor<S>> {
    let sh = stack.shape();
    if sh.len() != 3 || range.is_empty() || range.end > sh[0] {
        return Err(crate::Error::Shape(format!(
            "cannot pool layers {range:?} of stack {sh:?}"
        )));
    }
    let (n, d) = (sh[1], sh[2]);
    let per = n * d;
    let data = stack.data();
    let first = range.start;
    let mut out = data[first * per..(first + 1) * per].to_vec();
    for l in range.clone().skip(1) {
        let layer = &data[l * per..(l + 1) * per];
        for (o, &v) in out.iter_mut().zip(layer) {
            *o = match mode {
                PoolMode::Max => {
                    if v > *o {
                        v
                    } else {
                        *o
                    }
                }
                PoolMode::Mean | PoolMode::Sum => *o + v,
            };
        }
    }
    if mode == PoolMode::Mean {
        let inv = S::one() / S::from_f64(range.len() as f64);
        for o in &mut out {
            *o = *o * inv;
        }
    }
    Tensor::new(vec![n, d], out)
}
