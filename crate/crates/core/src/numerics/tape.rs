//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape from the loss towards the leaves in reverse creation order, so the
//! accumulation order of every gradient is fixed by program order alone.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean visibility mask for [`Tape::masked_softmax`].
///
/// Shape `[groups, rows, cols]`; `true` marks a visible entry.
#[derive(Debug, Clone)]
pub struct Mask {
    pub groups: usize,
    pub rows: usize,
    pub cols: usize,
    pub visible: Arc<Vec<bool>>,
}

impl Mask {
    pub fn new(groups: usize, rows: usize, cols: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != groups * rows * cols {
            return Err(Error::Shape(format!(
                "mask [{groups}, {rows}, {cols}] given {} entries",
                visible.len()
            )));
        }
        Ok(Self {
            groups,
            rows,
            cols,
            visible: Arc::new(visible),
        })
    }

    /// Lower-triangular mask: row `i` sees columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut v = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                v[i * n + j] = true;
            }
        }
        Self {
            groups: 1,
            rows: n,
            cols: n,
            visible: Arc::new(v),
        }
    }

    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self {
            groups: 1,
            rows,
            cols,
            visible: Arc::new(vec![true; rows * cols]),
        }
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Vec<S>>),
    AddBias(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Gelu(Var),
    Sqrt(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    MaskedSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Transpose12 { x: Var, dims: [usize; 4] },
    Reshape(Var),
    SumAll(Var),
    SumLast(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recorded computation plus the names of registered parameters.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, Var)>,
}

/// Gradients keyed by parameter path.
pub type Gradients<S> = BTreeMap<String, Tensor<S>>;

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient but is not a named parameter.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, t: Tensor<S>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            bsh.len() == 2 && !ash.is_empty() && ash[ash.len() - 1] == bsh[0],
            "matmul shapes {ash:?} x {bsh:?}"
        );
        let k = bsh[0];
        let n = bsh[1];
        let m = self.value(a).len() / k.max(1);
        let m = if k == 0 { ash[..ash.len() - 1].iter().product() } else { m };
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), ng)
    }

    /// Batched product `[N, m, k] x [N, k, n]`, or `[N, m, k] x [N, n, k]^T`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(ash.len() == 3 && bsh.len() == 3 && ash[0] == bsh[0], "bmm {ash:?} {bsh:?}");
        let (nb, m, k) = (ash[0], ash[1], ash[2]);
        let n = if trans_b {
            assert_eq!(bsh[2], k, "bmm^T inner dim");
            bsh[1]
        } else {
            assert_eq!(bsh[1], k, "bmm inner dim");
            bsh[2]
        };
        let mut out = vec![S::zero(); nb * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..nb {
                let a_i = &ad[i * m * k..(i + 1) * m * k];
                let b_i = &bd[i * k * n..(i + 1) * k * n];
                let c_i = &mut out[i * m * n..(i + 1) * m * n];
                let (rsb, csb) = if trans_b {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                S::gemm(m, k, n, S::one(), a_i, k as isize, 1, b_i, rsb, csb, S::zero(), c_i, n as isize, 1);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(vec![nb, m, n], out),
            Op::Bmm { a, b, trans_b },
            ng,
        )
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what} shapes");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "add", |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "sub", |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "mul", |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<S>) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), c.len(), "mul_const length");
        let data = x.data().iter().zip(&c).map(|(&p, &q)| p * q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(t, Op::MulConst(a, Arc::new(c)), ng)
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = self.value(bias).len();
        assert_eq!(self.value(x).last_dim(), n, "add_bias width");
        let bd = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(&bd) {
                *v = *v + *b;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(bias);
        self.push(t, Op::AddBias(x, bias), ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect());
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v + c).collect());
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| gelu_fwd(v)).collect(),
        );
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.sqrt()).collect());
        let ng = self.ng(a);
        self.push(t, Op::Sqrt(a), ng)
    }

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(gamma).len(), d, "layer_norm gamma");
        assert_eq!(self.value(beta).len(), d, "layer_norm beta");
        let xv = self.value(x);
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = S::from_f64(LN_EPS);
        let inv_d = S::one() / S::from_f64(d as f64);
        let mut out = vec![S::zero(); xv.len()];
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Softmax over the last axis of `[N, rows, cols]`, restricted to visible
    /// entries. Slice `n` uses mask group `n / (N / mask.groups)`. Rows with
    /// no visible entry produce all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Var {
        let sh = self.shape(x).to_vec();
        assert!(sh.len() == 3, "masked_softmax expects rank 3, got {sh:?}");
        let (nb, rows, cols) = (sh[0], sh[1], sh[2]);
        assert!(
            mask.rows == rows && mask.cols == cols && mask.groups > 0 && nb % mask.groups == 0,
            "mask [{}, {}, {}] vs scores {sh:?}",
            mask.groups,
            mask.rows,
            mask.cols
        );
        let per_group = nb / mask.groups;
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); xd.len()];
        for n in 0..nb {
            let g = n / per_group;
            for r in 0..rows {
                let base = (n * rows + r) * cols;
                let mbase = (g * rows + r) * cols;
                let vis = &mask.visible[mbase..mbase + cols];
                let src = &xd[base..base + cols];
                let mut max = S::neg_infinity();
                for c in 0..cols {
                    if vis[c] && src[c] > max {
                        max = src[c];
                    }
                }
                if max == S::neg_infinity() {
                    continue;
                }
                let dst = &mut out[base..base + cols];
                let mut sum = S::zero();
                for c in 0..cols {
                    if vis[c] {
                        let e = (src[c] - max).exp();
                        dst[c] = e;
                        sum = sum + e;
                    }
                }
                for c in 0..cols {
                    if vis[c] {
                        dst[c] = dst[c] / sum;
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(sh, out), Op::MaskedSoftmax(x), ng)
    }

    /// Row gather from a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.rank(), 2, "embedding table rank");
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding id {id} >= {vocab}");
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Swaps axes 1 and 2 of a rank-4 tensor.
    pub fn transpose12(&mut self, x: Var) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4, "transpose12 expects rank 4");
        let dims = [sh[0], sh[1], sh[2], sh[3]];
        let out = permute12(self.value(x).data(), dims);
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![sh[0], sh[2], sh[1], sh[3]], out),
            Op::Transpose12 { x, dims },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape.to_vec())
            .expect("reshape element count");
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Sums the trailing axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let data: Vec<S> = xv.data().chunks(d.max(1)).map(|c| c.iter().copied().sum()).collect();
        let mut shape = xv.shape().to_vec();
        shape.pop();
        let data = if d == 0 { vec![S::zero(); shape.iter().product()] } else { data };
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::SumLast(x), ng)
    }

    /// Per-row negative log-likelihood of `[N, V]` logits; rows with a `None`
    /// target yield 0. Output `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let n = lv.rows();
        assert_eq!(n, targets.len(), "cross_entropy rows");
        let mut probs = vec![S::zero(); lv.len()];
        let mut out = vec![S::zero(); n];
        for r in 0..n {
            let Some(t) = targets[r] else { continue };
            assert!(t < v, "target {t} >= vocab {v}");
            let row = &lv.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &z) in row.iter().enumerate() {
                let e = (z - max).exp();
                probs[r * v + j] = e;
                sum = sum + e;
            }
            for j in 0..v {
                probs[r * v + j] = probs[r * v + j] / sum;
            }
            out[r] = sum.ln() + max - row[t];
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::from_parts(vec![n], out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`; returns gradients of all named
    /// parameters that participate in it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let grads = self.backward_all(loss)?;
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                let shape = self.value(*v).shape().to_vec();
                out.insert(name.clone(), Tensor::from_parts(shape, g.clone()));
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` for every listed leaf (zeros where it does not participate).
    pub fn grads_of(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor<S>>> {
        let grads = self.backward_all(loss)?;
        Ok(leaves
            .iter()
            .map(|v| {
                let shape = self.value(*v).shape().to_vec();
                match &grads[v.0] {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<S>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.shape(*b)[0];
                let n = self.shape(*b)[1];
                let m = if k == 0 {
                    self.value(*a).shape()[..self.value(*a).rank() - 1].iter().product()
                } else {
                    self.value(*a).len() / k
                };
                if self.ng(*a) {
                    let bd = self.value(*b).data();
                    acc(grads, *a, self.value(*a).len(), |da| {
                        S::gemm(m, n, k, S::one(), g, n as isize, 1, bd, 1, n as isize, S::one(), da, k as isize, 1);
                    });
                }
                if self.ng(*b) {
                    let ad = self.value(*a).data();
                    acc(grads, *b, k * n, |db| {
                        S::gemm(k, m, n, S::one(), ad, 1, k as isize, g, n as isize, 1, S::one(), db, n as isize, 1);
                    });
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let ash = self.shape(*a);
                let (nb, m, k) = (ash[0], ash[1], ash[2]);
                let n = node.value.shape()[2];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.ng(*a) {
                    acc(grads, *a, nb * m * k, |da| {
                        for t in 0..nb {
                            let g_t = &g[t * m * n..(t + 1) * m * n];
                            let b_t = &bd[t * k * n..(t + 1) * k * n];
                            let da_t = &mut da[t * m * k..(t + 1) * m * k];
                            // dA = G B^T, with B stored [k, n] or [n, k]
                            let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                            S::gemm(m, n, k, S::one(), g_t, n as isize, 1, b_t, rsb, csb, S::one(), da_t, k as isize, 1);
                        }
                    });
                }
                if self.ng(*b) {
                    acc(grads, *b, nb * k * n, |db| {
                        for t in 0..nb {
                            let g_t = &g[t * m * n..(t + 1) * m * n];
                            let a_t = &ad[t * m * k..(t + 1) * m * k];
                            let db_t = &mut db[t * k * n..(t + 1) * k * n];
                            if *trans_b {
                                // B^T is [k, n]; dB [n, k] = G^T A
                                S::gemm(n, m, k, S::one(), g_t, 1, n as isize, a_t, k as isize, 1, S::one(), db_t, k as isize, 1);
                            } else {
                                S::gemm(k, m, n, S::one(), a_t, 1, k as isize, g_t, n as isize, 1, S::one(), db_t, n as isize, 1);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        acc(grads, v, g.len(), |d| add_into(d, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.len(), |d| add_into(d, g));
                }
                if self.ng(*b) {
                    acc(grads, *b, g.len(), |d| {
                        for (x, &y) in d.iter_mut().zip(g) {
                            *x = *x - y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bd = self.value(*b).data();
                    acc(grads, *a, g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] = d[j] + g[j] * bd[j];
                        }
                    });
                }
                if self.ng(*b) {
                    let ad = self.value(*a).data();
                    acc(grads, *b, g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] = d[j] + g[j] * ad[j];
                        }
                    });
                }
            }
            Op::MulConst(a, c) => {
                if self.ng(*a) {
                    acc(grads, *a, g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] = d[j] + g[j] * c[j];
                        }
                    });
                }
            }
            Op::AddBias(x, bias) => {
                if self.ng(*x) {
                    acc(grads, *x, g.len(), |d| add_into(d, g));
                }
                if self.ng(*bias) {
                    let n = self.value(*bias).len();
                    acc(grads, *bias, n, |d| {
                        for row in g.chunks(n.max(1)) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    acc(grads, *a, g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] = d[j] + g[j] * *c;
                        }
                    });
                }
            }
            Op::AddScalar(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g.len(), |d| add_into(d, g));
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let xd = self.value(*a).data();
                    acc(grads, *a, g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] = d[j] + g[j] * gelu_grad(xd[j]);
                        }
                    });
                }
            }
            Op::Sqrt(a) => {
                if self.ng(*a) {
                    let yd = node.value.data();
                    let half = S::from_f64(0.5);
                    acc(grads, *a, g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] = d[j] + g[j] * half / yd[j];
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let rows = rstd.len();
                if self.ng(*gamma) {
                    acc(grads, *gamma, d, |dg| {
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if self.ng(*beta) {
                    acc(grads, *beta, d, |db| {
                        for row in g.chunks(d.max(1)) {
                            add_into(db, row);
                        }
                    });
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma).data();
                    let inv_d = S::one() / S::from_f64(d as f64);
                    acc(grads, *x, g.len(), |dx| {
                        let mut gh = vec![S::zero(); d];
                        for r in 0..rows {
                            let mut mean_gh = S::zero();
                            let mut mean_ghx = S::zero();
                            for j in 0..d {
                                let v = g[r * d + j] * gam[j];
                                gh[j] = v;
                                mean_gh = mean_gh + v;
                                mean_ghx = mean_ghx + v * xhat[r * d + j];
                            }
                            mean_gh = mean_gh * inv_d;
                            mean_ghx = mean_ghx * inv_d;
                            for j in 0..d {
                                let h = xhat[r * d + j];
                                dx[r * d + j] =
                                    dx[r * d + j] + rstd[r] * (gh[j] - mean_gh - h * mean_ghx);
                            }
                        }
                    });
                }
            }
            Op::MaskedSoftmax(x) => {
                if self.ng(*x) {
                    let y = node.value.data();
                    let cols = node.value.last_dim();
                    acc(grads, *x, g.len(), |dx| {
                        for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                            let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            let base = r * cols;
                            for c in 0..cols {
                                dx[base + c] = dx[base + c] + yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let d = self.shape(*table)[1];
                    let len = self.value(*table).len();
                    acc(grads, *table, len, |dt| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::Transpose12 { x, dims } => {
                if self.ng(*x) {
                    // output dims are [a, c, b, d]; permuting back swaps again
                    let back = permute12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    acc(grads, *x, g.len(), |dx| add_into(dx, &back));
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    acc(grads, *x, g.len(), |dx| add_into(dx, g));
                }
            }
            Op::SumAll(x) => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    acc(grads, *x, n, |dx| {
                        for v in dx.iter_mut() {
                            *v = *v + g[0];
                        }
                    });
                }
            }
            Op::SumLast(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let d = xv.last_dim();
                    acc(grads, *x, xv.len(), |dx| {
                        for (r, row) in dx.chunks_mut(d.max(1)).enumerate() {
                            for v in row.iter_mut() {
                                *v = *v + g[r];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.ng(*logits) {
                    let v = self.value(*logits).last_dim();
                    acc(grads, *logits, probs.len(), |dl| {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = t else { continue };
                            for j in 0..v {
                                let onehot = if j == *t { S::one() } else { S::zero() };
                                dl[r * v + j] = dl[r * v + j] + g[r] * (probs[r * v + j] - onehot);
                            }
                        }
                    });
                }
            }
        }
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize, f: impl FnOnce(&mut [S])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
    f(slot);
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn permute12<S: Scalar>(src: &[S], dims: [usize; 4]) -> Vec<S> {
    let [a, b, c, d] = dims;
    let mut out = vec![S::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

fn gelu_consts<S: Scalar>() -> (S, S) {
    (S::from_f64((2.0 / std::f64::consts::PI).sqrt()), S::from_f64(0.044715))
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let (c, k) = gelu_consts::<S>();
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let (c, k) = gelu_consts::<S>();
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x)
}
