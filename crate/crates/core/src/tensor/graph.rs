use rand::Rng;

use super::kernels::{conv2d_backward, conv2d_forward, maxpool_forward, Padding, PoolGeometry};
use super::{shape_err, Tensor, TensorError};
use crate::metrics;
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: PoolGeometry },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    Sum(Var),
    Mean(Var),
    Expand(Var),
    SelectStep { x: Var, step: usize },
    Stack(Vec<Var>),
    Column { x: Var, col: usize },
    Ccc { pred: Var, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any trainable leaf is upstream of this node.
    tracked: bool,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a == b {
        Ok(())
    } else {
        Err(shape_err(op, format!("{a:?} vs {b:?}")))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let tracked = self.tracked(&[x]);
        self.push(value, op, tracked)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta.shape(), tb.shape())?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(shape_err(
                "matmul",
                format!(
                    "expected 2-D operands, got {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                ),
            ));
        };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner extents {k} and {k2} differ"),
            ));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let width = *tx
            .shape()
            .last()
            .ok_or_else(|| shape_err("add_bias", "scalar input"))?;
        if tb.shape() != [width] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(width) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), tracked))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), T::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), T::ln)
    }

    /// Identity; named so model code can state the activation explicitly.
    pub fn linear(&mut self, x: Var) -> Var {
        x
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let width = *tx
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut value = tx.clone();
        if width > 0 {
            for row in value.data_mut().chunks_mut(width) {
                softmax_in_place(row);
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Softmax(x), tracked))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let lead = {
            let s = self.shape(*first);
            s.get(..s.len().saturating_sub(1))
                .filter(|_| !s.is_empty())
                .ok_or_else(|| shape_err("concat", "scalar input"))?
                .to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} does not extend {lead:?}"),
                ));
            }
            widths.push(s[lead.len()]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// NHWC cross-correlation with `[kh, kw, in, out]` filters.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let &[kh, kw, cin, filters] = tw.shape() else {
            return Err(shape_err(
                "conv2d",
                format!("filter shape {:?}", tw.shape()),
            ));
        };
        let geom = PoolGeometry::resolve("conv2d", tx.shape(), (kh, kw), stride, padding)?;
        if geom.channels != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, filter expects {cin}", geom.channels),
            ));
        }
        let data = conv2d_forward(&geom, tx.data(), tw.data(), filters);
        let value = Tensor::new(geom.output_shape(filters), data)?;
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, tracked))
    }

    pub fn maxpool2d(
        &mut self,
        x: Var,
        ksize: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let geom = PoolGeometry::resolve("maxpool2d", tx.shape(), ksize, stride, padding)?;
        let (data, argmax) = maxpool_forward(&geom, tx.data());
        let value = Tensor::new(geom.output_shape(geom.channels), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, tracked))
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)` in
    /// training; evaluation mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: T,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(rate >= T::zero() && rate < T::one()) {
            return Err(TensorError::Usage(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == T::zero() {
            return Ok(x);
        }
        let keep = T::one() - rate;
        let inv = T::one() / keep;
        let keep_p = keep.to_f64_lossless();
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep_p {
                    inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_usize_lossy(t.numel().max(1));
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), tracked)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.nodes[x.0].value.item()?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::full(shape, v), Op::Expand(x), tracked))
    }

    /// `[B, T, F]` → `[B, F]` at time index `step`.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let &[b, steps, f] = t.shape() else {
            return Err(shape_err(
                "select_step",
                format!("expected B×T×F, got {:?}", t.shape()),
            ));
        };
        if step >= steps {
            return Err(shape_err("select_step", format!("step {step} of {steps}")));
        }
        let mut data = Vec::with_capacity(b * f);
        for bi in 0..b {
            let base = (bi * steps + step) * f;
            data.extend_from_slice(&t.data()[base..base + f]);
        }
        let value = Tensor::new(vec![b, f], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SelectStep { x, step }, tracked))
    }

    /// Stacks `[B, F]` steps into `[B, T, F]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var, TensorError> {
        let first = steps
            .first()
            .ok_or_else(|| shape_err("stack_steps", "no steps"))?;
        let &[b, f] = self.shape(*first) else {
            return Err(shape_err("stack_steps", "steps must be B×F"));
        };
        for s in steps {
            same_shape("stack_steps", self.shape(*s), &[b, f])?;
        }
        let n = steps.len();
        let mut data = vec![T::zero(); b * n * f];
        for (t, s) in steps.iter().enumerate() {
            let src = self.nodes[s.0].value.data();
            for bi in 0..b {
                let dst = (bi * n + t) * f;
                data[dst..dst + f].copy_from_slice(&src[bi * f..(bi + 1) * f]);
            }
        }
        let value = Tensor::new(vec![b, n, f], data)?;
        let tracked = self.tracked(steps);
        Ok(self.push(value, Op::Stack(steps.to_vec()), tracked))
    }

    /// Column `col` of a 2-D tensor as a vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let &[rows, cols] = t.shape() else {
            return Err(shape_err(
                "column",
                format!("expected 2-D, got {:?}", t.shape()),
            ));
        };
        if col >= cols {
            return Err(shape_err("column", format!("column {col} of {cols}")));
        }
        let data = (0..rows).map(|r| t.data()[r * cols + col]).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::from_vec(data), Op::Column { x, col }, tracked))
    }

    /// Concordance correlation coefficient between a prediction vector and a
    /// fixed target, with its closed-form gradient.
    pub fn ccc(&mut self, pred: Var, target: &[T]) -> Result<Var, TensorError> {
        let p = self.nodes[pred.0].value.data();
        let rho = metrics::ccc(p, target).map_err(|e| TensorError::Degenerate(e.to_string()))?;
        let tracked = self.tracked(&[pred]);
        Ok(self.push(
            Tensor::scalar(rho),
            Op::Ccc {
                pred,
                target: target.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradient buffers start at zero on
    /// every call.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (&[m, k], &[_, n]) = (self.shape(*a), self.shape(*b)) else {
                    unreachable!()
                };
                if self.want(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(val(*b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    accumulate(&mut grads[a.0], m * k, |d| add_into(d, &da));
                }
                if self.want(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose(val(*a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    accumulate(&mut grads[b.0], k * n, |d| add_into(d, &db));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.want(v) {
                        accumulate(&mut grads[v.0], g.len(), |d| add_into(d, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.want(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| add_into(d, g));
                }
                if self.want(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.want(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                            *d += g * y;
                        }
                    });
                }
                if self.want(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if self.want(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                            *d += g / y;
                        }
                    });
                }
                if self.want(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for (((d, &g), &y), &q) in d.iter_mut().zip(g).zip(vb).zip(out) {
                            *d -= g * q / y;
                        }
                    });
                }
            }
            Op::AddBias(x, bias) => {
                if self.want(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| add_into(d, g));
                }
                if self.want(*bias) {
                    let w = len(*bias);
                    accumulate(&mut grads[bias.0], w, |d| {
                        for row in g.chunks(w) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                accumulate(&mut grads[x.0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += s * g)
                });
            }
            Op::Sigmoid(x) => accumulate(&mut grads[x.0], g.len(), |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y * (T::one() - y);
                }
            }),
            Op::Tanh(x) => accumulate(&mut grads[x.0], g.len(), |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * (T::one() - y * y);
                }
            }),
            Op::Relu(x) => {
                let vx = val(*x);
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                })
            }
            Op::Log(x) => {
                let vx = val(*x);
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        *d += g / v;
                    }
                })
            }
            Op::Softmax(x) => {
                let w = *node.value.shape().last().unwrap();
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for p in parts {
                    let w = *self.shape(*p).last().unwrap();
                    if self.want(*p) {
                        accumulate(&mut grads[p.0], rows * w, |d| {
                            for r in 0..rows {
                                add_into(
                                    &mut d[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g.len(), |d| add_into(d, g)),
            Op::Conv2d { x, w, geom } => {
                let filters = *self.shape(*w).last().unwrap();
                let (dx, dw) = conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    filters,
                    g,
                    self.want(*x),
                    self.want(*w),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx.len(), |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], dw.len(), |d| add_into(d, &dw));
                }
            }
            Op::MaxPool { x, argmax } => accumulate(&mut grads[x.0], len(*x), |d| {
                for (&src, &g) in argmax.iter().zip(g) {
                    d[src] += g;
                }
            }),
            Op::Dropout { x, mask } => accumulate(&mut grads[x.0], g.len(), |d| {
                for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::Sum(x) => {
                let g0 = g[0];
                accumulate(&mut grads[x.0], len(*x), |d| {
                    d.iter_mut().for_each(|d| *d += g0)
                })
            }
            Op::Mean(x) => {
                let n = len(*x);
                let g0 = g[0] / T::from_usize_lossy(n.max(1));
                accumulate(&mut grads[x.0], n, |d| d.iter_mut().for_each(|d| *d += g0))
            }
            Op::Expand(x) => {
                let s: T = g.iter().copied().sum();
                accumulate(&mut grads[x.0], 1, |d| d[0] += s)
            }
            Op::SelectStep { x, step } => {
                let &[b, steps, f] = self.shape(*x) else {
                    unreachable!()
                };
                accumulate(&mut grads[x.0], b * steps * f, |d| {
                    for bi in 0..b {
                        let base = (bi * steps + step) * f;
                        add_into(&mut d[base..base + f], &g[bi * f..(bi + 1) * f]);
                    }
                })
            }
            Op::Stack(steps) => {
                let &[b, n, f] = node.value.shape() else {
                    unreachable!()
                };
                for (t, s) in steps.iter().enumerate() {
                    if !self.want(*s) {
                        continue;
                    }
                    accumulate(&mut grads[s.0], b * f, |d| {
                        for bi in 0..b {
                            let src = (bi * n + t) * f;
                            add_into(&mut d[bi * f..(bi + 1) * f], &g[src..src + f]);
                        }
                    });
                }
            }
            Op::Column { x, col } => {
                let &[rows, cols] = self.shape(*x) else {
                    unreachable!()
                };
                accumulate(&mut grads[x.0], rows * cols, |d| {
                    for (r, &g) in g.iter().enumerate() {
                        d[r * cols + col] += g;
                    }
                })
            }
            Op::Ccc { pred, target } => {
                let p = val(*pred);
                // Forward already validated the denominator.
                let dp = metrics::ccc_gradient(p, target).expect("validated in forward");
                let g0 = g[0];
                accumulate(&mut grads[pred.0], p.len(), |d| {
                    d.iter_mut().zip(&dp).for_each(|(d, &v)| *d += g0 * v)
                })
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}
