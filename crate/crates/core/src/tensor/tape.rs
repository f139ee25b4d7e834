use super::kernels::{self, ConvGeom, PoolGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    ConcatChannels(Var, Var),
    GatherChannels {
        input: Var,
        channels: Vec<usize>,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order; backward walks it from the end.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter); its gradient is kept after backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.insert(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.insert(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn insert(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.insert(value, op, requires_grad))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(name, value, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    /// Cross-correlation with bias. `weight` is `[C_out, C_in, K_h, K_w]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let [batch, c_in, h, w] = self.value(input).dims4()?;
        let [c_out, wc_in, kh, kw] = self.value(weight).dims4()?;
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, weights expect {wc_in}"),
            ));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{c_out}]", self.shape(bias)),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (ho, wo) = match (
            kernels::out_extent(h, kh, stride.0, padding.0),
            kernels::out_extent(w, kw, stride.1, padding.1),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::Extent {
                    op: "conv2d",
                    detail: format!("input {h}x{w}, kernel {kh}x{kw}, pad {padding:?}"),
                })
            }
        };
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho,
            wo,
        };
        let data = kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new(vec![batch, c_out, ho, wo], data)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    pub fn maxpool2d(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let [batch, c, h, w] = self.value(input).dims4()?;
        if padding.0 >= window.0 || padding.1 >= window.1 {
            return Err(Error::shape("maxpool2d", "padding must be smaller than the window"));
        }
        let (ho, wo) = match (
            kernels::out_extent(h, window.0, stride.0, padding.0),
            kernels::out_extent(w, window.1, stride.1, padding.1),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::Extent {
                    op: "maxpool2d",
                    detail: format!("input {h}x{w}, window {window:?}, pad {padding:?}"),
                })
            }
        };
        let geom = PoolGeom {
            batch,
            c,
            h,
            w,
            kh: window.0,
            kw: window.1,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho,
            wo,
        };
        let (data, argmax) = kernels::maxpool_forward(self.value(input).data(), &geom);
        let value = Tensor::new(vec![batch, c, ho, wo], data)?;
        self.push("maxpool2d", value, Op::MaxPool2d { input, argmax }, &[input])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// Softmax over `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = src.data();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let m = (0..dim).map(|d| xs[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (xs[at(d)] - m).exp();
                    out[at(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    out[at(d)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "softmax",
            value,
            Op::Softmax {
                input: x,
                outer,
                dim,
                inner,
            },
            &[x],
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (la, lb) = (ca * ha * wa, cb * hb * wb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for n in 0..na {
            data.extend_from_slice(&da[n * la..(n + 1) * la]);
            data.extend_from_slice(&db[n * lb..(n + 1) * lb]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        self.push("concat_channels", value, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Selects channels (rank-4, axis 1) in the given order.
    pub fn gather_channels(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if let Some(&bad) = channels.iter().find(|&&ch| ch >= c) {
            return Err(Error::shape(
                "gather_channels",
                format!("channel {bad} out of {c}"),
            ));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * channels.len() * plane);
        for b in 0..n {
            for &ch in channels {
                let at = (b * c + ch) * plane;
                data.extend_from_slice(&src[at..at + plane]);
            }
        }
        let value = Tensor::new(vec![n, channels.len(), h, w], data)?;
        self.push(
            "gather_channels",
            value,
            Op::GatherChannels {
                input: x,
                channels: channels.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// `Σ wᵢ·xᵢ` with constant weights of the same extent as `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let src = self.value(x);
        if weights.len() != src.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), src.len()),
            ));
        }
        let total = src.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum(x, weights),
            &[x],
        )
    }

    /// Reverse-mode sweep from a scalar root. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root).to_vec();
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let n = &self.nodes[v.0];
                if !n.requires_grad {
                    return;
                }
                let buf = adj[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    let slot = self.grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let want_input = self.nodes[input.0].requires_grad;
                    let grads = kernels::conv_backward(
                        self.nodes[input.0].value.data(),
                        self.nodes[weight.0].value.data(),
                        &g,
                        geom,
                        want_input,
                    );
                    if let Some(dx) = grads.input {
                        send(*input, &mut |b| add_into(b, &dx));
                    }
                    send(*weight, &mut |b| add_into(b, &grads.weight));
                    send(*bias, &mut |b| add_into(b, &grads.bias));
                }
                Op::MaxPool2d { input, argmax } => send(*input, &mut |b| {
                    for (&src, d) in argmax.iter().zip(&g) {
                        b[src] += d;
                    }
                }),
                Op::Relu(x) => {
                    let xs = self.nodes[x.0].value.data();
                    send(*x, &mut |b| {
                        for ((bi, &xi), d) in b.iter_mut().zip(xs).zip(&g) {
                            if xi > 0.0 {
                                *bi += d;
                            }
                        }
                    })
                }
                Op::Sigmoid(x) => {
                    let ys = node.value.data();
                    send(*x, &mut |b| {
                        for ((bi, &y), d) in b.iter_mut().zip(ys).zip(&g) {
                            *bi += d * y * (1.0 - y);
                        }
                    })
                }
                Op::Softmax {
                    input,
                    outer,
                    dim,
                    inner,
                } => {
                    let ys = node.value.data();
                    let (outer, dim, inner) = (*outer, *dim, *inner);
                    send(*input, &mut |b| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |d: usize| (o * dim + d) * inner + i;
                                let dot: f64 = (0..dim).map(|d| g[at(d)] * ys[at(d)]).sum();
                                for d in 0..dim {
                                    b[at(d)] += ys[at(d)] * (g[at(d)] - dot);
                                }
                            }
                        }
                    })
                }
                Op::ConcatChannels(a, bv) => {
                    let [n, ca, h, w] = self.nodes[a.0].value.dims4()?;
                    let cb = self.nodes[bv.0].value.shape()[1];
                    let (la, lb) = (ca * h * w, cb * h * w);
                    send(*a, &mut |buf| {
                        for k in 0..n {
                            add_into(&mut buf[k * la..(k + 1) * la], &g[k * (la + lb)..k * (la + lb) + la]);
                        }
                    });
                    send(*bv, &mut |buf| {
                        for k in 0..n {
                            let off = k * (la + lb) + la;
                            add_into(&mut buf[k * lb..(k + 1) * lb], &g[off..off + lb]);
                        }
                    });
                }
                Op::GatherChannels { input, channels } => {
                    let [n, c, h, w] = self.nodes[input.0].value.dims4()?;
                    let plane = h * w;
                    send(*input, &mut |buf| {
                        for bi in 0..n {
                            for (slot, &ch) in channels.iter().enumerate() {
                                let src = (bi * channels.len() + slot) * plane;
                                let dst = (bi * c + ch) * plane;
                                add_into(&mut buf[dst..dst + plane], &g[src..src + plane]);
                            }
                        }
                    })
                }
                Op::Reshape(x) => send(*x, &mut |b| add_into(b, &g)),
                Op::Add(a, b) => {
                    send(*a, &mut |buf| add_into(buf, &g));
                    send(*b, &mut |buf| add_into(buf, &g));
                }
                Op::Sub(a, b) => {
                    send(*a, &mut |buf| add_into(buf, &g));
                    send(*b, &mut |buf| buf.iter_mut().zip(&g).for_each(|(s, d)| *s -= d));
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    send(*a, &mut |buf| {
                        for ((s, d), y) in buf.iter_mut().zip(&g).zip(xb) {
                            *s += d * y;
                        }
                    });
                    send(*b, &mut |buf| {
                        for ((s, d), x) in buf.iter_mut().zip(&g).zip(xa) {
                            *s += d * x;
                        }
                    });
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    send(*x, &mut |buf| buf.iter_mut().zip(&g).for_each(|(s, d)| *s += c * d))
                }
                Op::Square(x) => {
                    let xs = self.nodes[x.0].value.data();
                    send(*x, &mut |buf| {
                        for ((s, d), v) in buf.iter_mut().zip(&g).zip(xs) {
                            *s += 2.0 * v * d;
                        }
                    })
                }
                Op::Exp(x) => {
                    let ys = node.value.data();
                    send(*x, &mut |buf| {
                        for ((s, d), y) in buf.iter_mut().zip(&g).zip(ys) {
                            *s += y * d;
                        }
                    })
                }
                Op::Log(x) => {
                    let xs = self.nodes[x.0].value.data();
                    send(*x, &mut |buf| {
                        for ((s, d), v) in buf.iter_mut().zip(&g).zip(xs) {
                            *s += d / v;
                        }
                    })
                }
                Op::ClampMin(x, floor) => {
                    let xs = self.nodes[x.0].value.data();
                    let floor = *floor;
                    send(*x, &mut |buf| {
                        for ((s, d), &v) in buf.iter_mut().zip(&g).zip(xs) {
                            if v > floor {
                                *s += d;
                            }
                        }
                    })
                }
                Op::Sum(x) => {
                    let d = g[0];
                    send(*x, &mut |buf| buf.iter_mut().for_each(|s| *s += d))
                }
                Op::WeightedSum(x, w) => {
                    let d = g[0];
                    send(*x, &mut |buf| {
                        for (s, wi) in buf.iter_mut().zip(w) {
                            *s += d * wi;
                        }
                    })
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
