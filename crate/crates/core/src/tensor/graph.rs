use std::borrow::Cow;

use super::kernels::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Relu {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Ln {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        // heads × L × L attention weights, zero where masked
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Nodes are stored in execution order, which is also a topological order, so
/// the backward pass is a single reverse sweep. Gradients of leaves accumulate
/// across calls to [`Graph::backward`] until [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Contract(format!("{op} expects a 2-D tensor, got shape {shape:?}"))),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf borrowing `t`'s storage; it is differentiable iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a non-differentiable leaf regardless of `t`'s flag.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Records a leaf that takes ownership of `t`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Copies a node's value into a fresh tensor without gradient state.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shapes are validated on insert")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let value = self.value(v);
        if value.len() == 1 {
            Ok(value[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape(v)
            )))
        }
    }

    /// Accumulated gradient of a differentiable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul_nt")?;
        let (n, k2) = dims2(self.shape(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, 0.0);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, trans_b: true }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add { a, b }, rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(x), "add_row_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let rg = self.needs(x) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddRowBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Affine { x, scale }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Relu { x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Exp { x }, rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.ln()).collect();
        let rg = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Ln { x }, rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let rg = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Clamp { x, lo, hi }, rg)
    }

    /// Normalizes over the last dimension with the biased variance, then
    /// applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Input(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xs.len() / n;
        let mut normalized = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                normalized.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `L×d` query, key and value
    /// matrices, heads taken as contiguous column blocks. With `causal`, row
    /// `i` attends only to rows `j ≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (l, d) = dims2(self.shape(q), "attention")?;
        if self.shape(k) != [l, d] || self.shape(v) != [l, d] {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Input(format!("{d} columns do not split into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let span = if causal { i + 1 } else { l };
                let row = &mut probs[(h * l + i) * l..(h * l + i) * l + span];
                let qi = &qs[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, p) in row.iter_mut().enumerate() {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    *p = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*p);
                }
                let mut z = 0.0;
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, p) in row.iter_mut().enumerate() {
                    *p /= z;
                    let vj = &vs[j * d + off..j * d + off + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += *p * x);
                }
            }
        }
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            vec![l, d],
            Cow::Owned(out),
            Op::Attention { q, k, v, heads, probs },
            rg,
        ))
    }

    /// Row lookup: output row `t` is row `ids[t]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(table), "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Input("gather_rows needs at least one id".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    index: id,
                    bound: rows,
                    context: "embedding row",
                });
            }
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let rg = self.needs(table);
        Ok(self.push(
            vec![ids.len(), cols],
            Cow::Owned(out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks 2-D parts with equal column counts along the row dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows needs at least one part".into()))?;
        let (_, cols) = dims2(self.shape(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.shape(p), "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, cols],
            Cow::Owned(out),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "select_rows")?;
        if rows.is_empty() {
            return Err(Error::Input("select_rows needs at least one row".into()));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    index: r,
                    bound: m,
                    context: "select_rows",
                });
            }
            out.extend_from_slice(&xs[r * n..(r + 1) * n]);
        }
        let rg = self.needs(x);
        Ok(self.push(
            vec![rows.len(), n],
            Cow::Owned(out),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(shape.to_vec(), Cow::Owned(value), Op::Reshape { x }, rg))
    }

    /// `−log softmax(logits)[target]` with max-subtraction. A 1-D `[V]` input
    /// yields a scalar; an `n×V` input with `n` targets yields one loss per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, v, out_shape) = match shape.as_slice() {
            [v] => (1, *v, Vec::new()),
            [r, v] => (*r, *v, vec![*r]),
            _ => return Err(Error::Contract(format!("cross_entropy on shape {shape:?}"))),
        };
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                index: t,
                bound: v,
                context: "cross_entropy target",
            });
        }
        let xs = self.value(logits);
        let mut probs = Vec::with_capacity(xs.len());
        let mut losses = Vec::with_capacity(rows);
        for (row, &t) in xs.chunks_exact(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = probs.len();
            probs.extend(row.iter().map(|x| (x - max).exp()));
            let z: f64 = probs[start..].iter().sum();
            probs[start..].iter_mut().for_each(|p| *p /= z);
            losses.push(z.ln() + max - row[t]);
        }
        let rg = self.needs(logits);
        Ok(self.push(
            out_shape,
            Cow::Owned(losses),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        let rg = self.needs(x);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(x);
        self.push(Vec::new(), Cow::Owned(vec![m]), Op::Mean { x }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are added to their
    /// accumulators, so two calls without [`Graph::zero_grad`] double them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                &Op::MatMul { a, b, trans_b } => {
                    let (m, k) = dims2(self.shape(a), "matmul")?;
                    let n = node.shape[1];
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        // dA = dC·Bᵀ, or dC·B when the forward used Bᵀ
                        gemm(m, n, k, &g, false, self.value(b), !trans_b, &mut da, 0.0);
                        accumulate(&mut grads, a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        if trans_b {
                            // dB = dCᵀ·A, shape n×k
                            gemm(n, m, k, &g, true, self.value(a), false, &mut db, 0.0);
                        } else {
                            // dB = Aᵀ·dC, shape k×n
                            gemm(k, m, n, self.value(a), true, &g, false, &mut db, 0.0);
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                &Op::Add { a, b } => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                &Op::AddRowBias { x, bias } => {
                    let n = node.shape[1];
                    if self.needs(bias) {
                        let mut db = vec![0.0; n];
                        for row in g.chunks_exact(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut grads, bias, db);
                    }
                    if self.needs(x) {
                        accumulate(&mut grads, x, g);
                    }
                }
                &Op::Affine { x, scale } => {
                    accumulate(&mut grads, x, g.iter().map(|v| v * scale).collect());
                }
                &Op::Relu { x } => {
                    let xs = self.value(x);
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x, dx);
                }
                &Op::Exp { x } => {
                    let dx = g.iter().zip(node.value.iter()).map(|(d, y)| d * y).collect();
                    accumulate(&mut grads, x, dx);
                }
                &Op::Ln { x } => {
                    let dx = g.iter().zip(self.value(x)).map(|(d, v)| d / v).collect();
                    accumulate(&mut grads, x, dx);
                }
                &Op::Clamp { x, lo, hi } => {
                    let dx = g
                        .iter()
                        .zip(self.value(x))
                        .map(|(d, &v)| if v >= lo && v <= hi { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let n = self.shape(gamma)[0];
                    if self.needs(gamma) {
                        let mut dg = vec![0.0; n];
                        for (gr, xr) in g.chunks_exact(n).zip(normalized.chunks_exact(n)) {
                            for j in 0..n {
                                dg[j] += gr[j] * xr[j];
                            }
                        }
                        accumulate(&mut grads, gamma, dg);
                    }
                    if self.needs(beta) {
                        let mut db = vec![0.0; n];
                        for gr in g.chunks_exact(n) {
                            db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut grads, beta, db);
                    }
                    if self.needs(x) {
                        let gam = self.value(gamma);
                        let mut dx = Vec::with_capacity(g.len());
                        for ((gr, xr), r) in g.chunks_exact(n).zip(normalized.chunks_exact(n)).zip(inv_std) {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..n {
                                let dxh = gr[j] * gam[j];
                                mean_d += dxh;
                                mean_dx += dxh * xr[j];
                            }
                            mean_d /= n as f64;
                            mean_dx /= n as f64;
                            for j in 0..n {
                                let dxh = gr[j] * gam[j];
                                dx.push(r * (dxh - mean_d - xr[j] * mean_dx));
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (q, k, v, heads) = (*q, *k, *v, *heads);
                    let (l, d) = (node.shape[0], node.shape[1]);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
                    let mut dq = vec![0.0; l * d];
                    let mut dk = vec![0.0; l * d];
                    let mut dv = vec![0.0; l * d];
                    let mut dp = vec![0.0; l];
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..l {
                            let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                            let go = &g[i * d + off..i * d + off + dh];
                            let mut dot = 0.0;
                            for j in 0..l {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vs[j * d + off..j * d + off + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += p[j] * dp[j];
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                dvj.iter_mut().zip(go).for_each(|(acc, o)| *acc += p[j] * o);
                            }
                            let qi = &qs[i * d + off..i * d + off + dh];
                            for j in 0..l {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = scale * p[j] * (dp[j] - dot);
                                let kj = &ks[j * d + off..j * d + off + dh];
                                let dqi = &mut dq[i * d + off..i * d + off + dh];
                                dqi.iter_mut().zip(kj).for_each(|(acc, kv)| *acc += ds * kv);
                                let dkj = &mut dk[j * d + off..j * d + off + dh];
                                dkj.iter_mut().zip(qi).for_each(|(acc, qv)| *acc += ds * qv);
                            }
                        }
                    }
                    if self.needs(q) {
                        accumulate(&mut grads, q, dq);
                    }
                    if self.needs(k) {
                        accumulate(&mut grads, k, dk);
                    }
                    if self.needs(v) {
                        accumulate(&mut grads, v, dv);
                    }
                }
                Op::GatherRows { table, ids } => {
                    let table = *table;
                    let cols = node.shape[1];
                    let mut dt = vec![0.0; self.value(table).len()];
                    for (row, &id) in g.chunks_exact(cols).zip(ids) {
                        dt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, table, dt);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let x = *x;
                    let n = node.shape[1];
                    let mut dx = vec![0.0; self.value(x).len()];
                    for (row, &r) in g.chunks_exact(n).zip(rows) {
                        dx[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, x, dx);
                }
                &Op::Reshape { x } => accumulate(&mut grads, x, g),
                Op::CrossEntropy { logits, targets, probs } => {
                    let v = probs.len() / targets.len();
                    let mut dl = probs.clone();
                    for (r, (&t, gr)) in targets.iter().zip(&g).enumerate() {
                        let row = &mut dl[r * v..(r + 1) * v];
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= gr);
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                &Op::Sum { x } => {
                    let n = self.value(x).len();
                    accumulate(&mut grads, x, vec![g[0]; n]);
                }
                &Op::Mean { x } => {
                    let n = self.value(x).len();
                    accumulate(&mut grads, x, vec![g[0] / n as f64; n]);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let (a, b) = (g.leaf(&i2), g.leaf(&m));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let (x, y) = (t(&[1, 1], &[2.0]), t(&[1, 1], &[3.0]));
        let (a, b) = (g.leaf(&x), g.leaf(&y));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let err = g.matmul(va, vb).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn relu_values_and_gradients() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let vx = g.leaf(&x);
        let y = g.relu(vx);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(vx).unwrap(), &[0.0, 0.0, 1.0]);

        let neg = t(&[2], &[-3.0, -0.5]).with_requires_grad(true);
        let mut g = Graph::new();
        let vx = g.leaf(&neg);
        let y = g.relu(vx);
        let s = g.sum(y);
        assert_eq!(g.value(y), &[0.0, 0.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(vx).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_slope_one_region_passes_upstream_gradient() {
        let x = t(&[1], &[3.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let vx = g.leaf(&x);
        let y = g.relu(vx);
        let y = g.scale(y, 7.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(vx).unwrap(), &[7.0]);
    }

    #[test]
    fn layer_norm_symmetric_and_constant_inputs() {
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = t(&[2], &[0.0, 0.0]);
        let x = t(&[2], &[1.0, -1.0]);
        let mut g = Graph::new();
        let (vx, vg, vb) = (g.leaf(&x), g.leaf(&ones), g.leaf(&zeros));
        let y = g.layer_norm(vx, vg, vb, 1e-12).unwrap();
        for (a, b) in g.value(y).iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() < 1e-9);
        }

        let c = t(&[3], &[5.0, 5.0, 5.0]);
        let gamma = t(&[3], &[2.0, 3.0, 4.0]);
        let beta = t(&[3], &[0.1, 0.2, 0.3]);
        let (vx, vg, vb) = (g.leaf(&c), g.leaf(&gamma), g.leaf(&beta));
        let y = g.layer_norm(vx, vg, vb, 1e-5).unwrap();
        assert_eq!(g.value(y), beta.data());
    }

    #[test]
    fn cross_entropy_uniform_and_dominant() {
        let u = t(&[4], &[0.3; 4]);
        let mut g = Graph::new();
        let v = g.leaf(&u);
        let l = g.cross_entropy(v, &[2]).unwrap();
        assert!((g.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(g.shape(l).is_empty());

        let d = t(&[3], &[100.0, 0.0, 0.0]);
        let v = g.leaf(&d);
        let l = g.cross_entropy(v, &[0]).unwrap();
        assert!(g.scalar(l).unwrap() < 1e-40);

        assert!(matches!(g.cross_entropy(v, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.leaf(&x);
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gives_ones_and_repeated_backward_doubles() {
        let x = t(&[2, 3], &[0.5; 6]).with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let s = g.sum(v);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[1.0; 6]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0; 6]);
        g.zero_grad();
        assert!(g.grad(v).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let c = g.constant(&x);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let q = t(&[2, 2], &[0.3, -0.2, 0.7, 0.1]);
        let k = t(&[2, 2], &[0.5, 0.4, -0.6, 0.9]);
        let v = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.leaf(&q), g.leaf(&k), g.leaf(&v));
        let o = g.attention(vq, vk, vv, 1, true).unwrap();
        assert_eq!(&g.value(o)[..2], &[1.0, 2.0]);
    }
}
