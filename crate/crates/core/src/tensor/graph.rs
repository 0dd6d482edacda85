use super::kernels::{self, ConvGeom, SampleGeom};
use super::{broadcast_shape, broadcast_strides, for_each_broadcast, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Abs,
    Neg,
    Log,
    Exp,
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Sqrt,
    /// `x * c`
    Scale(f64),
    /// `x + c`
    Offset(f64),
    /// `clamp(x, lo, hi)`; gradient passes only strictly inside the range.
    Clamp(f64, f64),
}

/// Backward rule of a user-registered primitive: receives the input
/// values, the output value and the output gradient, returns one gradient
/// per input (same lengths as the inputs).
pub type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Sum(Var),
    SumAxis { src: Var, axis: usize },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Bilinear { input: Var, coords: Var, geom: SampleGeom },
    Gather { src: Var, index: Vec<usize>, sign: Vec<T> },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
///
/// Nodes are never mutated after they are pushed. A graph is built per
/// training step and dropped afterwards.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf carrying the tensor's value; it is differentiable iff the
    /// tensor has `requires_grad` set.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.node(v).data.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::InvalidArgument(format!(
                "expected a scalar node, got shape {:?}",
                self.node(v).shape
            ))),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape {
            op: binary_name(op),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![T::zero(); out.iter().product()];
            let stra = broadcast_strides(&sa, &out);
            let strb = broadcast_strides(&sb, &out);
            for_each_broadcast(&out, &stra, &strb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            data
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, data, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let src = &self.node(a).data;
        let data: Vec<T> = match op {
            UnaryOp::Abs => src.iter().map(|x| x.abs()).collect(),
            UnaryOp::Neg => src.iter().map(|&x| -x).collect(),
            UnaryOp::Log => src.iter().map(|x| x.ln()).collect(),
            UnaryOp::Exp => src.iter().map(|x| x.exp()).collect(),
            UnaryOp::Sigmoid => src.iter().map(|&x| sigmoid(x)).collect(),
            UnaryOp::Tanh => src.iter().map(|x| x.tanh()).collect(),
            UnaryOp::Relu => src.iter().map(|&x| x.max(T::zero())).collect(),
            UnaryOp::Square => src.iter().map(|&x| x * x).collect(),
            UnaryOp::Sqrt => src.iter().map(|x| x.sqrt()).collect(),
            UnaryOp::Scale(c) => {
                let c = T::of_f64(c);
                src.iter().map(|&x| x * c).collect()
            }
            UnaryOp::Offset(c) => {
                let c = T::of_f64(c);
                src.iter().map(|&x| x + c).collect()
            }
            UnaryOp::Clamp(lo, hi) => {
                let (lo, hi) = (T::of_f64(lo), T::of_f64(hi));
                src.iter().map(|&x| x.max(lo).min(hi)).collect()
            }
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Unary(op, a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Offset(c), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryOp::Clamp(lo, hi), a)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.node(a).data.iter().map(|x| x.into_f64()).sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![T::of_f64(s)], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a).data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0f64;
                for k in 0..len {
                    s += src[(o * len + k) * inner + i].into_f64();
                }
                data.push(T::of_f64(s));
            }
        }
        let mut out = shape;
        out[axis] = 1;
        let rg = self.rg(a);
        Ok(self.push(out, data, Op::SumAxis { src: a, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let old = self.shape(a).to_vec();
        if shape.iter().product::<usize>() != old.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: old,
                rhs: shape,
            });
        }
        let data = self.node(a).data.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, data, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat: axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = &self.node(p).data;
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out = base;
        out[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(out, data, Op::Slice { src: a, axis, start }, rg))
    }

    /// 2-D cross-correlation of an NCHW input with an OIKK kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || sk[1] != si[1] || sk[2] != sk[3] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let (h, w, k) = (si[2] as isize, si[3] as isize, sk[2] as isize);
        let p = padding as isize;
        let s = stride as isize;
        if h + 2 * p - k < 0 || w + 2 * p - k < 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {k} with padding {padding} exceeds input {h}x{w}"
            )));
        }
        let ho = ((h + 2 * p - k) / s + 1) as usize;
        let wo = ((w + 2 * p - k) / s + 1) as usize;
        let geom = ConvGeom {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            o: sk[0],
            k: sk[2],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let data = kernels::conv2d_forward(&geom, &self.node(input).data, &self.node(kernel).data);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![geom.n, geom.o, ho, wo],
            data,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    /// Samples an NCHW `input` at continuous pixel coordinates `coords`
    /// (N×2×H'×W', channel 0 = x, channel 1 = y). Coordinates are clamped to
    /// the image border.
    pub fn bilinear_sample(&mut self, input: Var, coords: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sc = self.shape(coords).to_vec();
        if si.len() != 4 || sc.len() != 4 || sc[1] != 2 || sc[0] != si[0] {
            return Err(Error::Shape {
                op: "bilinear_sample",
                lhs: si,
                rhs: sc,
            });
        }
        let geom = SampleGeom {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            ho: sc[2],
            wo: sc[3],
        };
        let data = kernels::bilinear_forward(&geom, &self.node(input).data, &self.node(coords).data);
        let rg = self.rg(input) || self.rg(coords);
        Ok(self.push(
            vec![geom.n, geom.c, geom.ho, geom.wo],
            data,
            Op::Bilinear {
                input,
                coords,
                geom,
            },
            rg,
        ))
    }

    /// `out[i] = sign[i] * src[index[i]]`, reshaped to `shape`.
    pub fn gather(
        &mut self,
        src: Var,
        index: Vec<usize>,
        sign: Vec<T>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let shape = shape.into();
        let n = self.node(src).data.len();
        if index.len() != sign.len()
            || shape.iter().product::<usize>() != index.len()
            || index.iter().any(|&i| i >= n)
        {
            return Err(Error::InvalidArgument(format!(
                "gather: {} indices / {} signs into {n} elements for shape {shape:?}",
                index.len(),
                sign.len()
            )));
        }
        let s = &self.node(src).data;
        let data = index.iter().zip(&sign).map(|(&i, &g)| g * s[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(shape, data, Op::Gather { src, index, sign }, rg))
    }

    /// Registers an externally computed primitive with its own backward
    /// rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        let shape = output.shape().to_vec();
        self.push(
            shape,
            output.into_data(),
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Afterwards every
    /// differentiable node the loss depends on has a gradient (zeros when
    /// no path carries signal).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut reachable = vec![false; self.nodes.len()];
        reachable[loss.0] = true;
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            for p in parents(&self.nodes[i].op) {
                reachable[p.0] = true;
            }
            let Some(go) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        for i in 0..n {
            if reachable[i] && self.nodes[i].requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); self.nodes[i].data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn propagate(&self, i: usize, go: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => self.binary_backward(*op, *a, *b, &node.shape, go, grads),
            Op::Unary(op, a) => {
                if !self.rg(*a) {
                    return;
                }
                let x = &self.node(*a).data;
                let y = &node.data;
                let g: Vec<T> = match *op {
                    UnaryOp::Abs => zip1(go, x, |g, x| g * sign(x)),
                    UnaryOp::Neg => go.iter().map(|&g| -g).collect(),
                    UnaryOp::Log => zip1(go, x, |g, x| g / x),
                    UnaryOp::Exp => zip1(go, y, |g, y| g * y),
                    UnaryOp::Sigmoid => zip1(go, y, |g, y| g * y * (T::one() - y)),
                    UnaryOp::Tanh => zip1(go, y, |g, y| g * (T::one() - y * y)),
                    UnaryOp::Relu => zip1(go, x, |g, x| if x > T::zero() { g } else { T::zero() }),
                    UnaryOp::Square => zip1(go, x, |g, x| g * (x + x)),
                    UnaryOp::Sqrt => zip1(go, y, |g, y| g / (y + y)),
                    UnaryOp::Scale(c) => {
                        let c = T::of_f64(c);
                        go.iter().map(|&g| g * c).collect()
                    }
                    UnaryOp::Offset(_) => go.to_vec(),
                    UnaryOp::Clamp(lo, hi) => {
                        let (lo, hi) = (T::of_f64(lo), T::of_f64(hi));
                        zip1(go, x, |g, x| if x > lo && x < hi { g } else { T::zero() })
                    }
                };
                accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, vec![go[0]; self.node(*a).data.len()]);
                }
            }
            Op::SumAxis { src, axis } => {
                if !self.rg(*src) {
                    return;
                }
                let shape = &self.node(*src).shape;
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let dst = &mut g[(o * len + k) * inner..][..inner];
                        dst.copy_from_slice(&go[o * inner..][..inner]);
                    }
                }
                accumulate(grads, *src, g);
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, go.to_vec());
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            g.extend_from_slice(&go[from..from + len * inner]);
                        }
                        accumulate(grads, p, g);
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                if !self.rg(*src) {
                    return;
                }
                let shape = &self.node(*src).shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut g = vec![T::zero(); self.node(*src).data.len()];
                for o in 0..outer {
                    let to = (o * shape[*axis] + start) * inner;
                    g[to..to + len * inner].copy_from_slice(&go[o * len * inner..][..len * inner]);
                }
                accumulate(grads, *src, g);
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (gi, gk) = kernels::conv2d_backward(
                    geom,
                    &self.node(*input).data,
                    &self.node(*kernel).data,
                    go,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    accumulate(grads, *kernel, gk);
                }
            }
            Op::Bilinear {
                input,
                coords,
                geom,
            } => {
                let (gi, gc) = kernels::bilinear_backward(
                    geom,
                    &self.node(*input).data,
                    &self.node(*coords).data,
                    go,
                    self.rg(*input),
                    self.rg(*coords),
                );
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi);
                }
                if let Some(gc) = gc {
                    accumulate(grads, *coords, gc);
                }
            }
            Op::Gather { src, index, sign } => {
                if !self.rg(*src) {
                    return;
                }
                let mut g = vec![0f64; self.node(*src).data.len()];
                for ((&i, &s), &gv) in index.iter().zip(sign).zip(go) {
                    g[i] += (s * gv).into_f64();
                }
                accumulate(grads, *src, g.into_iter().map(T::of_f64).collect());
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(&vals, &node.data, go);
                for (&v, g) in inputs.iter().zip(gs) {
                    if self.rg(v) {
                        assert_eq!(g.len(), self.node(v).data.len(), "custom backward length");
                        accumulate(grads, v, g);
                    }
                }
            }
        }
    }

    fn binary_backward(
        &self,
        op: BinaryOp,
        a: Var,
        b: Var,
        out: &[usize],
        go: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (na, nb) = (self.node(a), self.node(b));
        let (xa, xb) = (&na.data, &nb.data);
        // d out / d a and d out / d b at one element
        let da = |_x: T, y: T| match op {
            BinaryOp::Add | BinaryOp::Sub => T::one(),
            BinaryOp::Mul => y,
            BinaryOp::Div => T::one() / y,
        };
        let db = |x: T, y: T| match op {
            BinaryOp::Add => T::one(),
            BinaryOp::Sub => -T::one(),
            BinaryOp::Mul => x,
            BinaryOp::Div => -x / (y * y),
        };
        let (wa, wb) = (na.requires_grad, nb.requires_grad);
        if na.shape == nb.shape {
            if wa {
                let g = (0..go.len()).map(|i| go[i] * da(xa[i], xb[i])).collect();
                accumulate(grads, a, g);
            }
            if wb {
                let g = (0..go.len()).map(|i| go[i] * db(xa[i], xb[i])).collect();
                accumulate(grads, b, g);
            }
            return;
        }
        let stra = broadcast_strides(&na.shape, out);
        let strb = broadcast_strides(&nb.shape, out);
        let mut ga = wa.then(|| vec![0f64; xa.len()]);
        let mut gb = wb.then(|| vec![0f64; xb.len()]);
        for_each_broadcast(out, &stra, &strb, |o, ia, ib| {
            let (x, y) = (xa[ia], xb[ib]);
            if let Some(ga) = ga.as_mut() {
                ga[ia] += (go[o] * da(x, y)).into_f64();
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += (go[o] * db(x, y)).into_f64();
            }
        });
        if let Some(g) = ga {
            accumulate(grads, a, g.into_iter().map(T::of_f64).collect());
        }
        if let Some(g) = gb {
            accumulate(grads, b, g.into_iter().map(T::of_f64).collect());
        }
    }
}

fn parents<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Binary(_, a, b) => vec![*a, *b],
        Op::Unary(_, a) | Op::Sum(a) | Op::Reshape(a) => vec![*a],
        Op::SumAxis { src, .. } | Op::Slice { src, .. } | Op::Gather { src, .. } => vec![*src],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
        Op::Bilinear { input, coords, .. } => vec![*input, *coords],
        Op::Custom { inputs, .. } => inputs.clone(),
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e = *e + x),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn zip1<T: Scalar>(go: &[T], x: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    go.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn abs_sigmoid_square_values() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[3], &[-1.0, 0.0, 2.0]));
        let a = g.abs(x);
        assert_eq!(g.value(a), &[1.0, 0.0, 2.0]);
        let z = g.constant(vec![1], vec![0.0]).unwrap();
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn square_backward_at_three_is_six() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[1], &[3.0]));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mismatched_shapes_report_both() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2], vec![0.0; 2]).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn broadcast_gradient_reduces_to_operand_shape() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.variable(&t(&[3], &[10., 20., 30.]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.grad(a).unwrap(), &[10., 20., 30., 10., 20., 30.]);
    }

    #[test]
    fn log_of_zero_propagates_non_finite() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![2], vec![0.0, -1.0]).unwrap();
        let y = g.log(x);
        assert!(g.value(y)[0].is_infinite());
        assert!(g.value(y)[1].is_nan());
    }

    #[test]
    fn diamond_graph_sums_path_products() {
        // f(x) = (x*x) * exp(x): f' = 2x e^x + x^2 e^x
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[1], &[0.7]));
        let a = g.square(x);
        let b = g.exp(x);
        let f = g.mul(a, b).unwrap();
        g.backward(f).unwrap();
        let xv: f64 = 0.7;
        let expect = 2.0 * xv * xv.exp() + xv * xv * xv.exp();
        assert!((g.grad(x).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn three_node_chain_matches_closed_form() {
        // f(x, y) = sigmoid(x * y) + tanh(y)
        let (xv, yv): (f64, f64) = (0.3, -1.2);
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[1], &[xv]));
        let y = g.variable(&t(&[1], &[yv]));
        let p = g.mul(x, y).unwrap();
        let s = g.sigmoid(p);
        let th = g.tanh(y);
        let f = g.add(s, th).unwrap();
        g.backward(f).unwrap();
        let sg = 1.0 / (1.0 + (-(xv * yv)).exp());
        let ds = sg * (1.0 - sg);
        assert!((g.grad(x).unwrap()[0] - ds * yv).abs() < 1e-12);
        let dy = ds * xv + 1.0 - yv.tanh().powi(2);
        assert!((g.grad(y).unwrap()[0] - dy).abs() < 1e-12);
    }

    #[test]
    fn unreachable_variables_get_no_grad_and_reachable_get_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[2], &[1.0, 2.0]));
        let unused = g.variable(&t(&[1], &[5.0]));
        let r = g.relu(x);
        let neg = g.neg(r);
        let dead = g.relu(neg);
        let s = g.sum(dead);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = g.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);
    }

    #[test]
    fn identity_kernel_with_padding_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..20).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = g.constant(vec![1, 1, 4, 5], data.clone()).unwrap();
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.constant(vec![1, 1, 3, 3], kd).unwrap();
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn conv_output_extent_follows_stride_formula() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 2, 7, 6], vec![0.0; 84]).unwrap();
        let k = g.constant(vec![3, 2, 3, 3], vec![0.0; 54]).unwrap();
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 4, 3]);
        let fits = g.constant(vec![1, 2, 5, 5], vec![0.0; 50]).unwrap();
        let y = g.conv2d(x, fits, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 2]);
        let big = g.constant(vec![1, 2, 7, 7], vec![0.0; 98]).unwrap();
        assert!(g.conv2d(x, big, 1, 0).is_err());
        let k1 = g.constant(vec![1, 2, 9, 9], vec![0.0; 162]).unwrap();
        assert!(g.conv2d(x, k1, 1, 0).is_err());
    }

    #[test]
    fn bilinear_at_lattice_and_center() {
        let mut g = Graph::<f32>::new();
        let img = g.constant(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let c = g.constant(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let y = g.bilinear_sample(img, c).unwrap();
        assert_eq!(g.value(y), &[1.5]);
        let lattice = g
            .constant(vec![1, 2, 1, 4], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0])
            .unwrap();
        let y = g.bilinear_sample(img, lattice).unwrap();
        assert_eq!(g.value(y), &[0.0, 1.0, 2.0, 3.0]);
        // clamped outside the border
        let far = g.constant(vec![1, 2, 1, 1], vec![-4.0, 9.0]).unwrap();
        let y = g.bilinear_sample(img, far).unwrap();
        assert_eq!(g.value(y), &[2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(&t(&[1, 1, 2], &[1.0, 2.0]));
        let b = g.variable(&t(&[1, 2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 2]);
        assert_eq!(g.value(c), &[1., 2., 3., 4., 5., 6.]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(s), &[3., 4., 5., 6.]);
        let w = g.constant(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let m = g.mul(s, w).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn gather_scatters_signed_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.gather(x, vec![2, 0, 2], vec![1.0, -1.0, 1.0], vec![3]).unwrap();
        assert_eq!(g.value(y), &[3.0, -1.0, 3.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.0, 0.0, 2.0]);
    }
}
