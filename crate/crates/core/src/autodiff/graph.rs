use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon inside the square root of the global layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-8;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScalarMul {
        scalar: Var,
        x: Var,
    },
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        // Empty for pointwise convolutions, whose columns are `x` itself.
        cols: Vec<T>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        frames: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        kernel: usize,
        dilation: usize,
        padding: usize,
    },
    PRelu {
        x: Var,
        slope: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: T,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Upsample {
        x: Var,
        index: Vec<usize>,
    },
    FitLength {
        x: Var,
        len_in: usize,
    },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Log(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a computation and differentiates it in reverse.
///
/// A graph is single-use per backward pass; call [`Graph::reset_grads`]
/// before running [`Graph::backward`] again.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Dimension(format!("{op}: {detail}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Only leaves created with `requires_grad`
    /// receive a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, available
    /// for leaves that require a gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), data.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn dims2(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected rank-2 input, got {s:?}"))),
        }
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Broadcasts a one-element `scalar` over `x`.
    pub fn scalar_mul(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return Err(shape_err(
                "scalar_mul",
                format!("scalar operand has shape {:?}", self.shape(scalar)),
            ));
        }
        let s = self.value(scalar).data()[0];
        let out = self.map(x, |v| s * v);
        Ok(self.push(out, Op::ScalarMul { scalar, x }, &[scalar, x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// 1-D convolution of `x (cin×len)` with `w (cout×cin×kernel)` and an
    /// optional per-output-channel bias.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Parameter(format!(
                "conv1d: stride {stride} and dilation {dilation} must be positive"
            )));
        }
        let (cin, len_in) = self.dims2("conv1d", x)?;
        let (cout, wcin, kernel) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(shape_err("conv1d", format!("weight must be rank 3, got {s:?}"))),
        };
        if wcin != cin || kernel == 0 {
            return Err(shape_err(
                "conv1d",
                format!("weight {:?} incompatible with {cin} input channels", self.shape(w)),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err(
                    "conv1d",
                    format!("bias {:?} for {cout} channels", self.shape(b)),
                ));
            }
        }
        let len_out = ConvGeom::output_len(len_in, kernel, stride, padding, dilation)
            .ok_or_else(|| shape_err("conv1d", format!("input length {len_in} shorter than kernel span")))?;
        let geom = ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            padding,
            dilation,
            len_in,
            len_out,
        };
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            kernels::im2col(self.value(x).data(), &geom)
        };
        let mut out = vec![T::zero(); cout * len_out];
        {
            let src = if geom.is_pointwise() {
                self.value(x).data()
            } else {
                &cols
            };
            kernels::matmul(
                cout,
                cin * kernel,
                len_out,
                self.value(w).data(),
                false,
                src,
                false,
                &mut out,
                false,
            );
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, &bc) in out.chunks_mut(len_out).zip(bv) {
                row.iter_mut().for_each(|v| *v += bc);
            }
        }
        let t = Tensor::new(vec![cout, len_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Transposed 1-D convolution (overlap-add synthesis) of `x (cin×frames)`
    /// with `w (cin×cout×kernel)`; output length `(frames-1)·stride + kernel`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv_transpose1d: stride must be positive".into()));
        }
        let (cin, frames) = self.dims2("conv_transpose1d", x)?;
        let (wcin, cout, kernel) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(shape_err(
                    "conv_transpose1d",
                    format!("weight must be rank 3, got {s:?}"),
                ))
            }
        };
        if wcin != cin || frames == 0 || kernel == 0 {
            return Err(shape_err(
                "conv_transpose1d",
                format!("weight {:?} vs input {:?}", self.shape(w), self.shape(x)),
            ));
        }
        let mut cols = vec![T::zero(); cout * kernel * frames];
        kernels::matmul(
            cout * kernel,
            cin,
            frames,
            self.value(w).data(),
            true,
            self.value(x).data(),
            false,
            &mut cols,
            false,
        );
        let out = kernels::overlap_add(&cols, cout, kernel, stride, frames);
        let len_out = (frames - 1) * stride + kernel;
        let t = Tensor::new(vec![cout, len_out], out)?;
        Ok(self.push(
            t,
            Op::ConvTranspose1d {
                x,
                w,
                cin,
                cout,
                kernel,
                stride,
                frames,
            },
            &[x, w],
        ))
    }

    /// Per-channel (depthwise) dilated convolution of `x (c×len)` with
    /// `w (c×kernel)`.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        w: Var,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::Parameter("depthwise_conv1d: dilation must be positive".into()));
        }
        let (c, len_in) = self.dims2("depthwise_conv1d", x)?;
        let (wc, kernel) = self.dims2("depthwise_conv1d", w)?;
        if wc != c || kernel == 0 {
            return Err(shape_err(
                "depthwise_conv1d",
                format!("weight {:?} vs {c} channels", self.shape(w)),
            ));
        }
        let len_out = ConvGeom::output_len(len_in, kernel, 1, padding, dilation).ok_or_else(|| {
            shape_err("depthwise_conv1d", format!("input length {len_in} shorter than kernel span"))
        })?;
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            c,
            len_in,
            kernel,
            dilation,
            padding,
            len_out,
        );
        let t = Tensor::new(vec![c, len_out], out)?;
        Ok(self.push(
            t,
            Op::Depthwise {
                x,
                w,
                kernel,
                dilation,
                padding,
            },
            &[x, w],
        ))
    }

    /// Depthwise dilated convolution followed by a pointwise (1×1)
    /// convolution `pointwise (cout×c×1)`.
    pub fn depthwise_separable_conv1d(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        pointwise_bias: Option<Var>,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let h = self.depthwise_conv1d(x, depthwise, dilation, padding)?;
        self.conv1d(h, pointwise, pointwise_bias, 1, 0, 1)
    }

    /// Parametric ReLU with one slope per channel (row) of `x (c×len)`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (c, len) = self.dims2("prelu", x)?;
        if self.shape(slope) != [c] {
            return Err(shape_err(
                "prelu",
                format!("slope {:?} for {c} channels", self.shape(slope)),
            ));
        }
        let a = self.value(slope).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &ac) in out.chunks_mut(len).zip(a) {
            for v in row.iter_mut() {
                if *v <= T::zero() {
                    *v = *v * ac;
                }
            }
        }
        let t = Tensor::new(vec![c, len], out)?;
        Ok(self.push(t, Op::PRelu { x, slope }, &[x, slope]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Global layer norm over all of `x (c×len)` with per-channel gain and
    /// bias.
    pub fn global_layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (c, len) = self.dims2("global_layer_norm", x)?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err(
                "global_layer_norm",
                format!(
                    "gain {:?} / bias {:?} for {c} channels",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x).data();
        let n = T::from_usize(xv.len()).expect("count");
        let mean = xv.iter().copied().sum::<T>() / n;
        let var = xv.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + T::from_f64_lossy(LAYER_NORM_EPS)).sqrt();
        let normalized: Vec<T> = xv.iter().map(|&v| (v - mean) * inv_std).collect();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = normalized.clone();
        for (ch, row) in out.chunks_mut(len).enumerate() {
            for v in row.iter_mut() {
                *v = *v * g[ch] + b[ch];
            }
        }
        let t = Tensor::new(vec![c, len], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Parameter("concat: no inputs".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Parameter(format!(
                "concat: axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Nearest-neighbour upsampling of `x (c×n)` along time to `target`
    /// steps; output step `i` copies frame `floor(i·n/target)`.
    pub fn nearest_upsample_time(&mut self, x: Var, target: usize) -> Result<Var> {
        let (c, n) = self.dims2("nearest_upsample_time", x)?;
        if n == 0 || target == 0 {
            return Err(Error::Parameter(format!(
                "nearest_upsample_time: cannot map {n} frames to {target} steps"
            )));
        }
        let index = nearest_index(n, target);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * target);
        for ch in 0..c {
            let row = &xv[ch * n..(ch + 1) * n];
            out.extend(index.iter().map(|&i| row[i]));
        }
        let t = Tensor::new(vec![c, target], out)?;
        Ok(self.push(t, Op::Upsample { x, index }, &[x]))
    }

    /// Trims or zero-pads the last axis to `len`.
    pub fn fit_length(&mut self, x: Var, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&len_in) = shape.last() else {
            return Err(shape_err("fit_length", "rank-0 input".into()));
        };
        let rows = if len_in == 0 { 0 } else { self.value(x).len() / len_in };
        let keep = len_in.min(len);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * len];
        for r in 0..rows {
            out[r * len..r * len + keep].copy_from_slice(&xv[r * len_in..r * len_in + keep]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().expect("rank") = len;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::FitLength { x, len_in }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.len().max(1)).expect("count");
        let s = xv.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// Natural logarithm.
    pub fn log(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.ln());
        self.push(out, Op::Log(x), &[x])
    }

    /// Populates gradients of the scalar `loss` with respect to every leaf
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            backprop_node(nodes, node, &g, &mut grads);
        }
        // Only leaf gradients survive.
        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Source frame for every upsampled step: `floor(i·n/target)`.
pub fn nearest_index(n: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| i * n / target).collect()
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(val(*b)) {
                    *d += g * o;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += g * o;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *f);
            }
        }
        Op::ScalarMul { scalar, x } => {
            let s = val(*scalar)[0];
            if let Some(d) = slot(nodes, grads, *scalar) {
                let acc: T = g.iter().zip(val(*x)).map(|(&g, &x)| g * x).sum();
                d[0] += acc;
            }
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s);
            }
        }
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                kernels::matmul(m, n, k, g, false, bv, true, d, true);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                kernels::matmul(k, m, n, av, true, g, false, d, true);
            }
        }
        Op::Conv1d {
            x,
            w,
            bias,
            geom,
            cols,
        } => {
            let ck = geom.cin * geom.kernel;
            let colsv: &[T] = if geom.is_pointwise() { val(*x) } else { cols };
            if let Some(d) = slot(nodes, grads, *w) {
                kernels::matmul(geom.cout, geom.len_out, ck, g, false, colsv, true, d, true);
            }
            if let Some(b) = bias {
                if let Some(d) = slot(nodes, grads, *b) {
                    for (db, row) in d.iter_mut().zip(g.chunks(geom.len_out)) {
                        *db += row.iter().copied().sum::<T>();
                    }
                }
            }
            let wv = val(*w);
            if let Some(d) = slot(nodes, grads, *x) {
                if geom.is_pointwise() {
                    kernels::matmul(ck, geom.cout, geom.len_out, wv, true, g, false, d, true);
                } else {
                    let mut dcols = vec![T::zero(); ck * geom.len_out];
                    kernels::matmul(ck, geom.cout, geom.len_out, wv, true, g, false, &mut dcols, false);
                    kernels::col2im_add(&dcols, geom, d);
                }
            }
        }
        Op::ConvTranspose1d {
            x,
            w,
            cin,
            cout,
            kernel,
            stride,
            frames,
        } => {
            let dcols = kernels::overlap_gather(g, *cout, *kernel, *stride, *frames);
            let ck = cout * kernel;
            let (xv, wv) = (val(*x), val(*w));
            if let Some(d) = slot(nodes, grads, *x) {
                kernels::matmul(*cin, ck, *frames, wv, false, &dcols, false, d, true);
            }
            if let Some(d) = slot(nodes, grads, *w) {
                kernels::matmul(*cin, *frames, ck, xv, false, &dcols, true, d, true);
            }
        }
        Op::Depthwise {
            x,
            w,
            kernel,
            dilation,
            padding,
        } => {
            let s = nodes[x.0].value.shape();
            let (c, len_in) = (s[0], s[1]);
            let len_out = node.value.shape()[1];
            let (xv, wv) = (val(*x), val(*w));
            // Two separate borrows of `grads` are needed; take dw out first.
            let mut dw = if nodes[w.0].requires_grad {
                Some(grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wv.len()]))
            } else {
                None
            };
            let dx = slot(nodes, grads, *x);
            kernels::depthwise_backward(
                g,
                xv,
                wv,
                c,
                len_in,
                *kernel,
                *dilation,
                *padding,
                len_out,
                dx.map(|v| v.as_mut_slice()),
                dw.as_deref_mut(),
            );
            if let Some(dw) = dw {
                grads[w.0] = Some(dw);
            }
        }
        Op::PRelu { x, slope } => {
            let s = nodes[x.0].value.shape();
            let len = s[1];
            let (xv, av) = (val(*x), val(*slope));
            if let Some(d) = slot(nodes, grads, *slope) {
                for (c, (gr, xr)) in g.chunks(len).zip(xv.chunks(len)).enumerate() {
                    let mut acc = T::zero();
                    for (&g, &x) in gr.iter().zip(xr) {
                        if x <= T::zero() {
                            acc += g * x;
                        }
                    }
                    d[c] += acc;
                }
            }
            if let Some(d) = slot(nodes, grads, *x) {
                for (c, ((dr, gr), xr)) in d
                    .chunks_mut(len)
                    .zip(g.chunks(len))
                    .zip(xv.chunks(len))
                    .enumerate()
                {
                    let a = av[c];
                    for ((d, &g), &x) in dr.iter_mut().zip(gr).zip(xr) {
                        *d += if x > T::zero() { g } else { a * g };
                    }
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let yv = node.value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(yv) {
                    *d += g * y * (T::one() - y);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let len = nodes[x.0].value.shape()[1];
            let gv = val(*gain);
            if let Some(d) = slot(nodes, grads, *gain) {
                for (c, (gr, nr)) in g.chunks(len).zip(normalized.chunks(len)).enumerate() {
                    d[c] += gr.iter().zip(nr).map(|(&g, &n)| g * n).sum::<T>();
                }
            }
            if let Some(d) = slot(nodes, grads, *bias) {
                for (c, gr) in g.chunks(len).enumerate() {
                    d[c] += gr.iter().copied().sum::<T>();
                }
            }
            if let Some(d) = slot(nodes, grads, *x) {
                let n = T::from_usize(g.len()).expect("count");
                let mut mean_g = T::zero();
                let mut mean_gn = T::zero();
                for (c, (gr, nr)) in g.chunks(len).zip(normalized.chunks(len)).enumerate() {
                    for (&g, &xn) in gr.iter().zip(nr) {
                        let gh = g * gv[c];
                        mean_g += gh;
                        mean_gn += gh * xn;
                    }
                }
                mean_g = mean_g / n;
                mean_gn = mean_gn / n;
                for (c, ((dr, gr), nr)) in d
                    .chunks_mut(len)
                    .zip(g.chunks(len))
                    .zip(normalized.chunks(len))
                    .enumerate()
                {
                    for ((d, &g), &xn) in dr.iter_mut().zip(gr).zip(nr) {
                        *d += *inv_std * (g * gv[c] - mean_g - xn * mean_gn);
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let chunk = nodes[v.0].value.shape()[*axis] * inner;
                if let Some(d) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        d[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
                offset += chunk;
            }
        }
        Op::Upsample { x, index } => {
            let n = nodes[x.0].value.shape()[1];
            let target = index.len();
            if let Some(d) = slot(nodes, grads, *x) {
                for (dr, gr) in d.chunks_mut(n).zip(g.chunks(target)) {
                    for (&i, &g) in index.iter().zip(gr) {
                        dr[i] += g;
                    }
                }
            }
        }
        Op::FitLength { x, len_in } => {
            let len = *node.value.shape().last().expect("rank");
            let keep = (*len_in).min(len);
            if let Some(d) = slot(nodes, grads, *x) {
                if *len_in > 0 && len > 0 {
                    for (dr, gr) in d.chunks_mut(*len_in).zip(g.chunks(len)) {
                        dr[..keep]
                            .iter_mut()
                            .zip(&gr[..keep])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let n = T::from_usize(d.len().max(1)).expect("count");
                let share = g[0] / n;
                d.iter_mut().for_each(|d| *d += share);
            }
        }
        Op::Square(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                let two = T::one() + T::one();
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                    *d += two * x * g;
                }
            }
        }
        Op::Log(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                    *d += g / x;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv1d_difference_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 5], &[1., 2., 3., 4., 5.]));
        let w = g.constant(t(&[1, 1, 3], &[1., 0., -1.]));
        let y = g.conv1d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[-2., -2., -2.]);
    }

    #[test]
    fn identities() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1., -2., 3., 0.5]));
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let one = g.constant(Tensor::full(&[2, 2], 1.0));
        let a = g.add(x, zero).unwrap();
        let m = g.mul(x, one).unwrap();
        assert_eq!(g.value(a), g.value(x));
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn upsample_index_rule() {
        assert_eq!(nearest_index(2, 5), vec![0, 0, 0, 1, 1]);
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[7., 9.]));
        let y = g.nearest_upsample_time(x, 5).unwrap();
        assert_eq!(g.value(y).data(), &[7., 7., 7., 9., 9.]);
    }

    #[test]
    fn scalar_product_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::scalar(2.0), true);
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.mul(w, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[3.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2], &[1., 2.]), true);
        let y = g.square(w);
        assert!(matches!(g.backward(y), Err(Error::Backward(_))));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension(_))));
        let w = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(g.conv1d(a, w, None, 0, 0, 1), Err(Error::Parameter(_))));
        assert!(matches!(g.conv1d(a, w, None, 1, 0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1., 5., -2., 0.3, 8., 4.]));
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.global_layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 6.0;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn concat_on_both_axes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let d = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.shape(d), &[4, 2]);
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn transposed_conv_length() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 1], 1.0));
        let w = g.constant(Tensor::full(&[2, 1, 4], 0.5));
        let y = g.conv_transpose1d(x, w, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 4]);
        assert_eq!(g.value(y).data(), &[1., 1., 1., 1.]);
    }
}
