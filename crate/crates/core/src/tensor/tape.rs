use super::kernels::{col2im, im2col, matmul_into};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Neg,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        cols: Vec<T>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Unary(Unary, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Max {
        input: Var,
        at: usize,
    },
    LogSumExp {
        input: Var,
        temperature: T,
    },
    Softmax {
        input: Var,
        axis: usize,
        temperature: T,
    },
    Reshape(Var),
    Stack(Vec<Var>),
    Pick {
        input: Var,
        at: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Records operations in execution order for a single reverse sweep.
///
/// Nodes are appended only after their inputs exist, so the recording
/// order is a topological order and backward walks it in reverse.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn check_temperature<T: Element>(t: T) -> Result<()> {
    if !(t > T::zero()) || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.tensor.zero_grad());
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].tensor.requires_grad())
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.needs_grad(inputs);
        let tensor = Tensor::new(shape, data)
            .expect("op produced consistent shape")
            .with_requires_grad(rg);
        self.push(tensor, op)
    }

    /// Matrix product of an m×k and a k×n tensor.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map `x·wᵀ + b` for x of shape n×in (or in), w of shape out×in.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (rows, inner) = match sx.len() {
            1 => (1, sx[0]),
            2 => (sx[0], sx[1]),
            _ => return Err(dim_err("linear", &sx, &sw)),
        };
        if sw.len() != 2 || sw[1] != inner {
            return Err(dim_err("linear", &sx, &sw));
        }
        let outs = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [outs] {
                return Err(dim_err("linear bias", self.shape(b), &[outs]));
            }
        }
        let mut out = vec![T::zero(); rows * outs];
        matmul_into(rows, inner, outs, self.value(x), false, self.value(w), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_exact_mut(outs) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o = *o + *b);
            }
        }
        let shape = if sx.len() == 1 { vec![outs] } else { vec![rows, outs] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(shape, out, Op::Linear { x, w, b }, &inputs))
    }

    /// Valid stride-1 cross-correlation of a c_in×h×w input with
    /// c_out×c_in×kh×kw kernels plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernels).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] {
            return Err(dim_err("conv2d", &si, &sk));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}×{kw} does not fit input {h}×{w}"
            )));
        }
        if self.shape(bias) != [c_out] {
            return Err(dim_err("conv2d bias", self.shape(bias), &[c_out]));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let p = oh * ow;
        let ckk = c_in * kh * kw;
        let cols = im2col(self.value(input), c_in, h, w, kh, kw);
        let mut out = vec![T::zero(); c_out * p];
        for (row, b) in out.chunks_exact_mut(p).zip(self.value(bias)) {
            row.iter_mut().for_each(|v| *v = *b);
        }
        matmul_into(c_out, ckk, p, self.value(kernels), false, &cols, false, &mut out, true);
        let inputs = [input, kernels, bias];
        // Only keep the patch matrix when the kernels need their gradient.
        let cols = if self.needs_grad(&[kernels]) { cols } else { Vec::new() };
        Ok(self.record(
            vec![c_out, oh, ow],
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                cols,
            },
            &inputs,
        ))
    }

    /// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::Dimension(format!(
                "maxpool2 needs c×h×w with h, w ≥ 2, got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            let base = ci * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let r0 = base + 2 * oy * w + 2 * ox;
                    let mut best = r0;
                    for cand in [r0 + 1, r0 + w, r0 + w + 1] {
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.record(vec![c, oh, ow], out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Unary::Tanh => |v| v.tanh(),
            Unary::Sigmoid => |v| T::one() / (T::one() + (-v).exp()),
            Unary::Neg => |v| -v,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, Op::Unary(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, Op::Scale(x, factor), &[x])
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.record(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Maximum over all elements; the gradient goes to the first maximiser.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let vals = self.value(x);
        if vals.is_empty() {
            return Err(Error::Dimension("max of empty tensor".into()));
        }
        let mut at = 0;
        for (i, v) in vals.iter().enumerate() {
            if *v > vals[at] {
                at = i;
            }
        }
        let m = vals[at];
        Ok(self.record(Vec::new(), vec![m], Op::Max { input: x, at }, &[x]))
    }

    /// `T · log Σ exp(z / T)` over all elements, max-subtracted.
    pub fn logsumexp(&mut self, x: Var, temperature: T) -> Result<Var> {
        check_temperature(temperature)?;
        let vals = self.value(x);
        if vals.is_empty() {
            return Err(Error::Dimension("logsumexp of empty tensor".into()));
        }
        let out = logsumexp_slice(vals, temperature);
        Ok(self.record(
            Vec::new(),
            vec![out],
            Op::LogSumExp {
                input: x,
                temperature,
            },
            &[x],
        ))
    }

    /// `softmax(z / T)` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: T) -> Result<Var> {
        check_temperature(temperature)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let vals = self.value(x);
        let mut out = vec![T::zero(); vals.len()];
        let mut lane = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = vals[(o * n + j) * inner + i];
                }
                softmax_in_place(&mut lane, temperature);
                for (j, l) in lane.iter().enumerate() {
                    out[(o * n + j) * inner + i] = *l;
                }
            }
        }
        Ok(self.record(
            shape,
            out,
            Op::Softmax {
                input: x,
                axis,
                temperature,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(dim_err("reshape", self.shape(x), &shape));
        }
        let data = self.value(x).to_vec();
        Ok(self.record(shape, data, Op::Reshape(x), &[x]))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("stack of zero tensors".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(*first).len());
        for &v in xs {
            if self.shape(v) != inner.as_slice() {
                return Err(dim_err("stack", &inner, self.shape(v)));
            }
            data.extend_from_slice(self.value(v));
        }
        let mut shape = vec![xs.len()];
        shape.extend(inner);
        Ok(self.record(shape, data, Op::Stack(xs.to_vec()), xs))
    }

    /// Selects one element (flat row-major index) as a scalar.
    pub fn pick(&mut self, x: Var, at: usize) -> Result<Var> {
        let v = *self.value(x).get(at).ok_or_else(|| {
            Error::Dimension(format!(
                "pick index {at} out of range for shape {:?}",
                self.shape(x)
            ))
        })?;
        Ok(self.record(Vec::new(), vec![v], Op::Pick { input: x, at }, &[x]))
    }

    /// Reverse sweep from a single-element `loss`. Gradients are added to
    /// existing buffers, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].tensor.requires_grad() {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            self.nodes[idx].tensor.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.tensor.data();
        let wants = |v: Var| self.nodes[v.0].tensor.requires_grad();
        let len = |v: Var| self.nodes[v.0].tensor.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    matmul_into(m, n, k, g, false, self.value(*b), true, slot(adj, *a, len(*a)), true);
                }
                if wants(*b) {
                    matmul_into(k, m, n, self.value(*a), true, g, false, slot(adj, *b, len(*b)), true);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (outs, inner) = (sw[0], sw[1]);
                let rows = len(*x) / inner;
                if wants(*x) {
                    matmul_into(rows, outs, inner, g, false, self.value(*w), false, slot(adj, *x, len(*x)), true);
                }
                if wants(*w) {
                    matmul_into(outs, rows, inner, g, true, self.value(*x), false, slot(adj, *w, len(*w)), true);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let db = slot(adj, *b, len(*b));
                        for row in g.chunks_exact(outs) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d = *d + *r);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                cols,
            } => {
                let si = self.shape(*input);
                let sk = self.shape(*kernels);
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
                let p = (h - kh + 1) * (w - kw + 1);
                let ckk = c_in * kh * kw;
                if wants(*kernels) {
                    matmul_into(c_out, p, ckk, g, false, cols, true, slot(adj, *kernels, len(*kernels)), true);
                }
                if wants(*bias) {
                    let db = slot(adj, *bias, len(*bias));
                    for (d, row) in db.iter_mut().zip(g.chunks_exact(p)) {
                        *d = *d + row.iter().copied().sum::<T>();
                    }
                }
                if wants(*input) {
                    let mut dcols = vec![T::zero(); ckk * p];
                    matmul_into(ckk, c_out, p, self.value(*kernels), true, g, false, &mut dcols, false);
                    col2im(&dcols, c_in, h, w, kh, kw, slot(adj, *input, len(*input)));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if wants(*input) {
                    let dx = slot(adj, *input, len(*input));
                    for (gi, &at) in g.iter().zip(argmax) {
                        dx[at] = dx[at] + *gi;
                    }
                }
            }
            Op::Unary(kind, x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let dx = slot(adj, *x, len(*x));
                    for i in 0..g.len() {
                        let local = match kind {
                            Unary::Relu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Tanh => T::one() - out[i] * out[i],
                            Unary::Sigmoid => out[i] * (T::one() - out[i]),
                            Unary::Neg => -T::one(),
                        };
                        dx[i] = dx[i] + g[i] * local;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let d = slot(adj, v, len(v));
                        d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let d = slot(adj, *a, len(*a));
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let d = slot(adj, *b, len(*b));
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    let d = slot(adj, *x, len(*x));
                    d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g * *f);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    slot(adj, *x, len(*x)).iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Max { input, at } | Op::Pick { input, at } => {
                if wants(*input) {
                    let d = slot(adj, *input, len(*input));
                    d[*at] = d[*at] + g[0];
                }
            }
            Op::LogSumExp { input, temperature } => {
                if wants(*input) {
                    let mut p = self.value(*input).to_vec();
                    softmax_in_place(&mut p, *temperature);
                    let d = slot(adj, *input, len(*input));
                    d.iter_mut().zip(&p).for_each(|(d, p)| *d = *d + g[0] * *p);
                }
            }
            Op::Softmax {
                input,
                axis,
                temperature,
            } => {
                if wants(*input) {
                    let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                    let d = slot(adj, *input, len(*input));
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..n {
                                let k = at(j);
                                d[k] = d[k] + out[k] * (g[k] - dot) / *temperature;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    let d = slot(adj, *x, len(*x));
                    d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g);
                }
            }
            Op::Stack(xs) => {
                let chunk = g.len() / xs.len().max(1);
                for (v, part) in xs.iter().zip(g.chunks_exact(chunk.max(1))) {
                    if wants(*v) {
                        let d = slot(adj, *v, len(*v));
                        d.iter_mut().zip(part).for_each(|(d, g)| *d = *d + *g);
                    }
                }
            }
        }
    }
}

fn slot<T: Element>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// `T · log Σ exp(z / T)` with max subtraction.
pub fn logsumexp_slice<T: Element>(z: &[T], temperature: T) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = z.iter().map(|&v| ((v - m) / temperature).exp()).sum();
    m + temperature * s.ln()
}

/// In-place `softmax(z / T)` with max subtraction.
pub fn softmax_in_place<T: Element>(z: &mut [T], temperature: T) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in z.iter_mut() {
        *v = ((*v - m) / temperature).exp();
        s = s + *v;
    }
    z.iter_mut().for_each(|v| *v = *v / s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(c), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.]);
        assert_eq!(tape.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&[3, 3], &mut rng);
        let a = random(&[3, 3], &mut rng);
        let err = gradient_check(
            |tape, x| {
                let bv = tape.constant(b.clone());
                let c = tape.matmul(x, bv)?;
                Ok(tape.sum(c))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = gradient_check(
            |tape, x| {
                let av = tape.constant(a.clone());
                let c = tape.matmul(av, x)?;
                let c2 = tape.mul(c, c)?;
                Ok(tape.sum(c2))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).iter().all(|&v| v == 1.0));

        let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y), &[10.]);

        let big = tape.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, big, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv2d_gradcheck_all_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let loss = |tape: &mut Tape<f64>, x, k, b| -> Result<Var> {
            let y = tape.conv2d(x, k, b)?;
            let y = tape.tanh(y);
            Ok(tape.sum(y))
        };
        let e_in = gradient_check(
            |tape, v| {
                let (kk, bb) = (tape.constant(k.clone()), tape.constant(b.clone()));
                loss(tape, v, kk, bb)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let e_k = gradient_check(
            |tape, v| {
                let (xx, bb) = (tape.constant(x.clone()), tape.constant(b.clone()));
                loss(tape, xx, v, bb)
            },
            &k,
            1e-5,
        )
        .unwrap();
        let e_b = gradient_check(
            |tape, v| {
                let (xx, kk) = (tape.constant(x.clone()), tape.constant(k.clone()));
                loss(tape, xx, kk, v)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(e_in < 1e-5 && e_k < 1e-5 && e_b < 1e-5, "{e_in} {e_k} {e_b}");
    }

    #[test]
    fn maxpool_examples_and_tie_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y), &[4.]);

        let c = tape.param(Tensor::full([1, 4, 5], 3.0));
        let y = tape.maxpool2(c).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert!(tape.value(y).iter().all(|&v| v == 3.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(c).unwrap();
        let hot: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
        // first row-major element of each window: (0,0), (0,2), (2,0), (2,2)
        assert_eq!(hot, vec![0, 2, 10, 12]);

        let small = tape.constant(Tensor::zeros([1, 1, 4]));
        assert!(tape.maxpool2(small).is_err());
    }

    #[test]
    fn maxpool_gradcheck_away_from_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // a shuffled arithmetic progression has no ties
        let mut vals: Vec<f64> = (0..36).map(|i| i as f64 * 0.1).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = t(&[1, 6, 6], &vals);
        let err = gradient_check(
            |tape, v| {
                let y = tape.maxpool2(v)?;
                let y2 = tape.mul(y, y)?;
                Ok(tape.sum(y2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        assert_eq!(tape.value(s), &[0.5]);
        assert_eq!(tape.value(th), &[0.0]);
        let a = tape.constant(Tensor::vector(vec![1., 2., 3.]));
        let b = tape.constant(Tensor::vector(vec![4., 5., 6.]));
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m), &[4., 10., 18.]);
        let short = tape.constant(Tensor::vector(vec![1., 2.]));
        assert!(matches!(tape.add(a, short), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pointwise_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[7], &mut rng);
        let y = random(&[7], &mut rng);
        type F = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
        let cases: [(&str, F); 7] = [
            ("tanh", |t, x, _| Ok(t.tanh(x))),
            ("sigmoid", |t, x, _| Ok(t.sigmoid(x))),
            ("relu", |t, x, _| Ok(t.relu(x))),
            ("neg", |t, x, _| Ok(t.neg(x))),
            ("scale", |t, x, _| Ok(t.scale(x, -2.5))),
            ("add", |t, x, y| t.add(x, y)),
            ("mul", |t, x, y| t.mul(x, y)),
        ];
        for (name, f) in cases {
            let err = gradient_check(
                |tape, v| {
                    let yy = tape.constant(y.clone());
                    let out = f(tape, v, yy)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum(sq))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn reduction_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(z, 0, 1.0).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        let l = tape.logsumexp(z, 1.0).unwrap();
        assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-15);
        let big = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let l = tape.logsumexp(big, 1.0).unwrap();
        assert!((tape.value(l)[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!(matches!(tape.logsumexp(z, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(tape.softmax(z, 0, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn reduction_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[3, 4], &mut rng);
        for axis in 0..2 {
            for temp in [1.0, 0.5, 3.0] {
                let err = gradient_check(
                    |tape, v| {
                        let s = tape.softmax(v, axis, temp)?;
                        let ww = tape.constant(w.clone());
                        let p = tape.mul(s, ww)?;
                        Ok(tape.sum(p))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-5, "softmax axis {axis} T {temp}: {err}");
            }
        }
        for temp in [1.0, 1000.0, 0.3] {
            let err = gradient_check(|tape, v| tape.logsumexp(v, temp), &x, 1e-5).unwrap();
            assert!(err < 1e-5, "lse {temp}: {err}");
        }
        let err = gradient_check(|tape, v| tape.max(v), &x, 1e-5).unwrap();
        assert!(err < 1e-5);
        let err = gradient_check(|tape, v| tape.pick(v, 5), &x, 1e-5).unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn linear_and_stack_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[4, 3], &mut rng);
        let w = random(&[2, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let err = gradient_check(
            |tape, v| {
                let bb = tape.constant(b.clone());
                let xx = tape.constant(x.clone());
                let y = tape.linear(xx, v, Some(bb))?;
                let y = tape.tanh(y);
                Ok(tape.sum(y))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
        let err = gradient_check(
            |tape, v| {
                let r = tape.reshape(v, [12])?;
                let rows: Vec<Var> = (0..3)
                    .map(|_| r)
                    .collect();
                let st = tape.stack(&rows)?;
                let sq = tape.mul(st, st)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn backward_examples_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        // intermediate nodes on the traversed graph are populated too
        assert_eq!(tape.grad(sq).unwrap(), &[1.0, 1.0]);

        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
