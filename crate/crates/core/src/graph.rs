//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] records every op of one forward pass. [`Graph::backward`]
//! walks the tape in reverse and leaves `∂loss/∂leaf` on every leaf that was
//! created with `requires_grad`. Graphs are cheap and single-use: build one per
//! forward pass and drop it after reading the gradients.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
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
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        padding: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn raw(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor::new(shape, values).expect("op produced a consistent tensor")
    }

    /// Records a leaf. Gradients are kept for it iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient left on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    /// `(m, k) · (k, n) → (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_kernel(self.value(a), self.value(b), m, k, n);
        Ok(self.push(Self::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `(B, m, k) · (B, k, n) → (B, m, n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => return Err(Error::dim("bmm", sa, sb)),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(matmul_kernel(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        Ok(self.push(
            Self::raw(vec![bs, m, n], out),
            Op::BatchMatMul(a, b),
            &[a, b],
        ))
    }

    /// Affine map on the last axis: `x (r, in)`, `w (out, in)`, `b (out)`,
    /// giving `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, input) = self.rank2("linear", x)?;
        let (output, w_in) = self.rank2("linear", w)?;
        if input != w_in {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [output] {
                return Err(Error::dim("linear bias", self.shape(b), &[output]));
            }
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; rows * output];
        for r in 0..rows {
            let xr = &xv[r * input..(r + 1) * input];
            for o in 0..output {
                let wr = &wv[o * input..(o + 1) * input];
                out[r * output + o] = dot(xr, wr);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(output) {
                for (o, bias) in row.iter_mut().zip(bv) {
                    *o += bias;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Self::raw(vec![rows, output], out),
            Op::Linear { x, w, b },
            &inputs,
        ))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::raw(shape, out), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::raw(shape, out), Op::Scale(x, c), &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(Self::raw(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::EmptyInput("layer_norm"))?;
        if self.shape(gamma) != [d] {
            return Err(Error::dim("layer_norm gamma", self.shape(gamma), &[d]));
        }
        if self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm beta", self.shape(beta), &[d]));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        Ok(self.push(
            Self::raw(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact (erf) Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::raw(shape, out), Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::raw(shape, out), Op::Sigmoid(x), &[x])
    }

    /// Stride-1 zero-padded cross-correlation. `x (N, C, H, W)`,
    /// `k (O, C, kh, kw)`, optional bias `(O)`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::dim("conv2d input", s, &[0, 0, 0, 0])),
        };
        let (o, kc, kh, kw) = match *self.shape(k) {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            ref s => return Err(Error::dim("conv2d kernel", s, &[0, 0, 0, 0])),
        };
        if kc != c {
            return Err(Error::dim("conv2d channels", self.shape(x), self.shape(k)));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Parameter(format!(
                "conv2d kernel extent must be odd, got {kh}x{kw}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim("conv2d spatial", self.shape(x), self.shape(k)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("conv2d bias", self.shape(b), &[o]));
            }
        }
        let geom = ConvGeom { c, h, w, kh, kw, padding };
        let (ho, wo) = geom.out_size();
        let (xv, kv) = (self.value(x), self.value(k));
        let mut out = Vec::with_capacity(n * o * ho * wo);
        for ni in 0..n {
            let cols = geom.im2col(&xv[ni * c * h * w..(ni + 1) * c * h * w]);
            let mut y = matmul_kernel(kv, &cols, o, c * kh * kw, ho * wo);
            if let Some(b) = b {
                for (row, bias) in y.chunks_mut(ho * wo).zip(self.value(b)) {
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
            out.extend(y);
        }
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(
            Self::raw(vec![n, o, ho, wo], out),
            Op::Conv2d { x, k, b, padding },
            &inputs,
        ))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Indices may repeat; the
    /// backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != index.len() {
            return Err(Error::dim("gather", &shape, &[index.len()]));
        }
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Index {
                op: "gather",
                axis: bad,
                rank: xv.len(),
            });
        }
        let out = index.iter().map(|&i| xv[i]).collect();
        Ok(self.push(Self::raw(shape, out), Op::Gather { x, index }, &[x]))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", x)?;
        let index = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, index, vec![c, r])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(Self::raw(shape, out), Op::Reshape(x), &[x]))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat"))?;
        let (rows, _) = self.rank2("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2("concat", p)?;
            if r != rows {
                return Err(Error::dim("concat", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            Self::raw(vec![rows, total], out),
            Op::Concat(parts.to_vec()),
            parts,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.grad = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.values();
        // Accumulates into an input's gradient buffer, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.values();
        let shp = |v: Var| nodes[v.0].value.shape();

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| matmul_grad_lhs(g, bv, da, m, k, n));
                acc(*b, &mut |db| matmul_grad_rhs(av, g, db, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (bs, m, k) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
                let n = shp(*b)[2];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for t in 0..bs {
                        matmul_grad_lhs(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for t in 0..bs {
                        matmul_grad_rhs(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (rows, input) = (shp(*x)[0], shp(*x)[1]);
                let output = shp(*w)[0];
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        for o in 0..output {
                            let go = g[r * output + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv[o * input..(o + 1) * input];
                            for (d, wi) in dx[r * input..(r + 1) * input].iter_mut().zip(wr) {
                                *d += go * wi;
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for r in 0..rows {
                        let xr = &xv[r * input..(r + 1) * input];
                        for o in 0..output {
                            let go = g[r * output + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, xi) in dw[o * input..(o + 1) * input].iter_mut().zip(xr) {
                                *d += go * xi;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks(output) {
                            for (d, go) in db.iter_mut().zip(row) {
                                *d += go;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(shp(*x), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + ii;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..n {
                                d[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *shp(*x).last().unwrap();
                let gv = val(*gamma);
                acc(*gamma, &mut |dg| {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for row_g in g.chunks(d) {
                        add_into(db, row_g);
                    }
                });
                acc(*x, &mut |dx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * gelu_grad_scalar(xv[j]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                });
            }
            Op::Conv2d { x, k, b, padding } => {
                let (n, c, h, w) = {
                    let s = shp(*x);
                    (s[0], s[1], s[2], s[3])
                };
                let (o, kh, kw) = {
                    let s = shp(*k);
                    (s[0], s[2], s[3])
                };
                let geom = ConvGeom { c, h, w, kh, kw, padding: *padding };
                let (ho, wo) = geom.out_size();
                let (hw, ckk) = (ho * wo, c * kh * kw);
                let (xv, kv) = (val(*x), val(*k));
                acc(*k, &mut |dk| {
                    for ni in 0..n {
                        let cols = geom.im2col(&xv[ni * c * h * w..(ni + 1) * c * h * w]);
                        matmul_grad_lhs(&g[ni * o * hw..(ni + 1) * o * hw], &cols, dk, o, ckk, hw);
                    }
                });
                acc(*x, &mut |dx| {
                    for ni in 0..n {
                        let mut dcols = vec![0.0; ckk * hw];
                        matmul_grad_rhs(kv, &g[ni * o * hw..(ni + 1) * o * hw], &mut dcols, o, ckk, hw);
                        geom.col2im_add(&dcols, &mut dx[ni * c * h * w..(ni + 1) * c * h * w]);
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for (idx, gv) in g.iter().enumerate() {
                            db[(idx / hw) % o] += gv;
                        }
                    });
                }
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |d| {
                    for (gv, &src) in g.iter().zip(index) {
                        d[src] += gv;
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Concat(parts) => {
                let rows = shp(parts[0])[0];
                let total: usize = parts.iter().map(|p| shp(*p)[1]).sum();
                let mut offset = 0;
                for p in parts {
                    let c = shp(*p)[1];
                    acc(*p, &mut |d| {
                        for r in 0..rows {
                            for j in 0..c {
                                d[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Sum of products with four independent accumulators, so the loop
/// vectorizes; the summation order is fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of one stride-1 convolution over a single `(C, H, W)` image.
#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
}

impl ConvGeom {
    fn out_size(&self) -> (usize, usize) {
        (self.h + 2 * self.padding - self.kh + 1, self.w + 2 * self.padding - self.kw + 1)
    }

    /// Calls `f(col_row, out_pos, in_pos)` for every in-bounds tap.
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_size();
        let p = self.padding;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for y in 0..ho {
                        let iy = y + ky;
                        if iy < p || iy - p >= self.h {
                            continue;
                        }
                        for xo in 0..wo {
                            let ix = xo + kx;
                            if ix < p || ix - p >= self.w {
                                continue;
                            }
                            f(row, y * wo + xo, (ci * self.h + iy - p) * self.w + ix - p);
                        }
                    }
                }
            }
        }
    }

    /// `(C·kh·kw, Ho·Wo)` patch matrix, zero where the kernel overhangs.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_size();
        let hw = ho * wo;
        let mut cols = vec![0.0; self.c * self.kh * self.kw * hw];
        self.taps(|row, pos, src| cols[row * hw + pos] = x[src]);
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo) = self.out_size();
        let hw = ho * wo;
        self.taps(|row, pos, src| dx[src] += cols[row * hw + pos]);
    }
}

/// `da += g · bᵀ`
fn matmul_grad_lhs(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            da[i * k + p] += dot(gi, bp);
        }
    }
}

/// `db += aᵀ · g`
fn matmul_grad_rhs(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *d += aip * gv;
            }
        }
    }
}
