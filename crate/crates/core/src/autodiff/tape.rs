use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability clamp used by the binary cross-entropy op.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise functions with a known local derivative.
#[derive(Clone, Copy, Debug)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
    Scale(f64),
    /// Caller-supplied function and derivative, both evaluated on the input.
    Custom {
        name: &'static str,
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    },
}

impl Elementwise {
    fn name(&self) -> &'static str {
        match self {
            Elementwise::Relu => "relu",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Exp => "exp",
            Elementwise::Log => "log",
            Elementwise::Neg => "neg",
            Elementwise::Scale(_) => "scale",
            Elementwise::Custom { name, .. } => name,
        }
    }

    fn apply(&self, x: f64) -> f64 {
        match *self {
            Elementwise::Relu => x.max(0.0),
            Elementwise::Sigmoid => kernels::sigmoid(x),
            Elementwise::Exp => x.exp(),
            Elementwise::Log => x.ln(),
            Elementwise::Neg => -x,
            Elementwise::Scale(c) => c * x,
            Elementwise::Custom { f, .. } => f(x),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Elementwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Elementwise::Sigmoid => y * (1.0 - y),
            Elementwise::Exp => y,
            Elementwise::Log => 1.0 / x,
            Elementwise::Neg => -1.0,
            Elementwise::Scale(c) => c,
            Elementwise::Custom { df, .. } => df(x),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Var, Elementwise),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Conv2d(Var, Var, ConvGeometry),
    Reshape(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    Clamp(Var, f64, f64),
    Bce(Var, Vec<f64>),
    KlDiag([Var; 4]),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation; `backward` walks it in
/// reverse. Inputs always precede the ops that consume them.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, or zeros of `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn row_len(t: &Tensor) -> Option<usize> {
    match t.shape() {
        [n] => Some(*n),
        [1, n] => Some(*n),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("param")?;
        Ok(self.push(t, Op::Leaf, true))
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("constant")?;
        Ok(self.push(t, Op::Leaf, false))
    }

    pub fn elementwise(&mut self, x: Var, f: Elementwise) -> Result<Var> {
        let input = &self.nodes[x.0].value;
        input.check_finite(f.name())?;
        if let Elementwise::Log = f {
            if let Some(i) = input.data().iter().position(|&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {} at index {i}", input.data()[i]),
                });
            }
        }
        let data = input.data().iter().map(|&v| f.apply(v)).collect();
        let value = Tensor::new(input.shape().to_vec(), data)?;
        self.push_checked(f.name(), value, Op::Unary(x, f), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Log)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Neg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.elementwise(x, Elementwise::Scale(c))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Bias-add: `x[M×N] + row[1×N]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let n = match (tx.shape(), row_len(tr)) {
            ([_, n], Some(rn)) if *n == rn => *n,
            _ => return Err(dim_err("add_row", tx, tr)),
        };
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, b) in chunk.iter_mut().zip(tr.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked("add_row", value, Op::AddRow(x, row), &[x, row])
    }

    /// Per-channel bias-add on a `[C, H, W]` map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let c = match (tx.shape(), tb.shape()) {
            ([c, _, _], [bc]) if c == bc => *c,
            _ => return Err(dim_err("add_channel_bias", tx, tb)),
        };
        let plane = tx.len() / c;
        let mut data = tx.data().to_vec();
        for (ch, chunk) in data.chunks_mut(plane).enumerate() {
            let b = tb.data()[ch];
            for d in chunk {
                *d += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked(
            "add_channel_bias",
            value,
            Op::AddChannelBias(x, bias),
            &[x, bias],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(dim_err("matmul", ta, tb)),
        };
        let value = Tensor::new(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        self.push_checked("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `x[C×H×W] ⋆ w[F×C×k×k]` with the given stride and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geo = match (tx.shape(), tw.shape()) {
            ([c, h, wd], [f, c2, k, k2])
                if c == c2 && k == k2 && stride >= 1 && *k <= h + 2 * pad && *k <= wd + 2 * pad =>
            {
                ConvGeometry {
                    channels: *c,
                    height: *h,
                    width: *wd,
                    filters: *f,
                    kernel: *k,
                    stride,
                    pad,
                }
            }
            _ => return Err(dim_err("conv2d", tx, tw)),
        };
        let out = kernels::conv2d(tx.data(), tw.data(), &geo);
        let value = Tensor::new(vec![geo.filters, geo.out_height(), geo.out_width()], out)?;
        self.push_checked("conv2d", value, Op::Conv2d(x, w, geo), &[x, w])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        self.push_checked("reshape", value, Op::Reshape(x), &[x])
    }

    /// Softmax over all elements of `x`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        tx.check_finite("softmax")?;
        let value = Tensor::new(tx.shape().to_vec(), kernels::softmax(tx.data()))?;
        self.push_checked("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means of an `[N, C]` matrix, as a `[1, C]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, c) = match t.shape() {
            [n, c] if *n > 0 => (*n, *c),
            _ => {
                return Err(Error::contract(format!(
                    "mean_rows needs a non-empty matrix, got {:?}",
                    t.shape()
                )))
            }
        };
        let mut acc = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= n as f64;
        }
        self.push_checked("mean_rows", Tensor::row(acc), Op::MeanRows(x), &[x])
    }

    /// Concatenates row vectors (`[n]` or `[1, n]`) into one `[1, Σn]` row.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if row_len(t).is_none() {
                return Err(Error::Dimension {
                    op: "concat",
                    left: t.shape().to_vec(),
                    right: vec![1, t.len()],
                });
            }
            data.extend_from_slice(t.data());
        }
        self.push_checked(
            "concat",
            Tensor::row(data),
            Op::Concat(parts.to_vec()),
            parts,
        )
    }

    /// Clamp into `[lo, hi]`; zero gradient where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push_checked("clamp", value, Op::Clamp(x, lo, hi), &[x])
    }

    /// Mean binary cross-entropy of probabilities against binary targets,
    /// with probabilities clamped to `[ε, 1−ε]`.
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let t = &self.nodes[probs.0].value;
        if t.is_empty() {
            return Err(Error::contract("bce over zero samples"));
        }
        if t.len() != targets.len() {
            return Err(Error::Dimension {
                op: "bce",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss = bce_value(t.data(), targets);
        self.push_checked(
            "bce",
            Tensor::scalar(loss),
            Op::Bce(probs, targets.to_vec()),
            &[probs],
        )
    }

    /// Closed-form `KL(N(μ₁, σ₁²) ‖ N(μ₂, σ₂²))` summed over diagonal dims.
    pub fn kl_diag(&mut self, mu1: Var, sigma1: Var, mu2: Var, sigma2: Var) -> Result<Var> {
        let vars = [mu1, sigma1, mu2, sigma2];
        let first = &self.nodes[mu1.0].value;
        for v in &vars[1..] {
            let t = &self.nodes[v.0].value;
            if t.len() != first.len() {
                return Err(dim_err("kl_diag", first, t));
            }
        }
        let [m1, s1, m2, s2] = vars.map(|v| self.nodes[v.0].value.data());
        if let Some(i) = s1.iter().chain(s2).position(|&s| s <= 0.0) {
            return Err(Error::Domain {
                op: "kl_diag",
                detail: format!("non-positive sigma at flat index {i}"),
            });
        }
        let kl = kl_diag_value(m1, s1, m2, s2);
        self.push_checked("kl_diag", Tensor::scalar(kl), Op::KlDiag(vars), &vars)
    }

    /// Reverse-mode sweep from a scalar `loss`. The tape is left untouched,
    /// so calling this twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, f) => {
                let xs = val(*x);
                let ys = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * f.derivative(xs[i], ys[i]);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*row, &mut |d| {
                    let n = d.len();
                    for chunk in g.chunks(n) {
                        for (dd, gg) in d.iter_mut().zip(chunk) {
                            *dd += gg;
                        }
                    }
                });
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| {
                    let plane = g.len() / d.len();
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        d[ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |d| {
                    kernels::matmul_grad_a(g, tb.data(), d, m, k, n)
                });
                acc(*b, &mut |d| {
                    kernels::matmul_grad_b(g, ta.data(), d, m, k, n)
                });
            }
            Op::Conv2d(x, w, geo) => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    kernels::conv2d_backward(g, xv, wv, geo, Some(d), None)
                });
                acc(*w, &mut |d| {
                    kernels::conv2d_backward(g, xv, wv, geo, None, Some(d))
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                acc(*x, &mut |d| {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                });
            }
            Op::MeanRows(x) => {
                acc(*x, &mut |d| {
                    let c = g.len();
                    let n = d.len() / c;
                    for row in d.chunks_mut(c) {
                        for (dd, gg) in row.iter_mut().zip(g) {
                            *dd += gg / n as f64;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let seg = &g[offset..offset + len];
                    acc(*p, &mut |d| {
                        d.iter_mut().zip(seg).for_each(|(d, g)| *d += g)
                    });
                    offset += len;
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xs = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xs[i] > *lo && xs[i] < *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Bce(p, targets) => {
                let ps = val(*p);
                let n = ps.len() as f64;
                acc(*p, &mut |d| {
                    for i in 0..d.len() {
                        let o = ps[i];
                        if o <= BCE_EPS || o >= 1.0 - BCE_EPS {
                            continue;
                        }
                        let y = targets[i];
                        d[i] += g[0] * (-(y / o) + (1.0 - y) / (1.0 - o)) / n;
                    }
                });
            }
            Op::KlDiag([mu1, s1, mu2, s2]) => {
                let (m1v, s1v, m2v, s2v) = (val(*mu1), val(*s1), val(*mu2), val(*s2));
                let g0 = g[0];
                acc(*mu1, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g0 * (m1v[i] - m2v[i]) / (s2v[i] * s2v[i]);
                    }
                });
                acc(*mu2, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g0 * (m1v[i] - m2v[i]) / (s2v[i] * s2v[i]);
                    }
                });
                acc(*s1, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g0 * (-1.0 / s1v[i] + s1v[i] / (s2v[i] * s2v[i]));
                    }
                });
                acc(*s2, &mut |d| {
                    for i in 0..d.len() {
                        let diff = m1v[i] - m2v[i];
                        let num = s1v[i] * s1v[i] + diff * diff;
                        d[i] += g0 * (1.0 / s2v[i] - num / (s2v[i] * s2v[i] * s2v[i]));
                    }
                });
            }
        }
    }
}

/// Mean clamped binary cross-entropy on plain slices.
pub fn bce_value(probs: &[f64], targets: &[f64]) -> f64 {
    let n = probs.len() as f64;
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&o, &y)| {
            let o = o.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * o.ln() + (1.0 - y) * (1.0 - o).ln())
        })
        .sum();
    total / n
}

/// Closed-form diagonal-Gaussian KL on plain slices.
pub fn kl_diag_value(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mu1.len() {
        let diff = mu1[i] - mu2[i];
        kl += (sigma2[i] / sigma1[i]).ln()
            + (sigma1[i] * sigma1[i] + diff * diff) / (2.0 * sigma2[i] * sigma2[i])
            - 0.5;
    }
    kl
}
