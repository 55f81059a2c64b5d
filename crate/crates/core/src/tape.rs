//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its value and the parents it was
//! computed from, so parents always precede children. [`Tape::backward`]
//! walks the list in reverse and accumulates gradients into buffers of the
//! same shape as each node's value. Summation order is fixed, so identical
//! tapes produce bit-identical gradients.

use crate::error::{Error, Result};
use crate::kernels::conv::{self, Padding};
use crate::kernels::extremum::{self, ExtremumKind};
use crate::kernels::norm::{self, InstanceNormSaved};
use crate::kernels::resample;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, S),
    Pow(Var, S),
    Sigmoid(Var),
    LeakyRelu(Var, S),
    ClampMin(Var, S),
    Conv3d {
        input: Var,
        kernel: Var,
        padding: Padding,
        stride: usize,
    },
    DepthwiseConv3d {
        input: Var,
        kernel: Var,
        padding: Padding,
    },
    AddChannelBias(Var, Var),
    Extremum {
        input: Var,
        offsets: Option<Var>,
        kind: ExtremumKind,
        window: [usize; 3],
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        saved: InstanceNormSaved<S>,
    },
    Upsample {
        input: Var,
        factor: [usize; 3],
    },
    Softmax(Var),
    ChannelSum(Var),
    Sum(Var),
    Mean(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Pow(..) => "pow",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Conv3d { .. } => "conv3d",
            Op::DepthwiseConv3d { .. } => "depthwise_conv3d",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Extremum { .. } => "sliding_extremum",
            Op::Concat(..) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Softmax(..) => "softmax",
            Op::ChannelSum(..) => "channel_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn is_integer<S: Scalar>(p: S) -> bool {
    p == p.round() && p.abs() <= S::of(64.0)
}

/// `x^p`, with integer exponents evaluated by repeated multiplication.
#[inline]
pub(crate) fn pow_value<S: Scalar>(x: S, p: S) -> S {
    if is_integer(p) {
        x.powi(p.to_i32().expect("small integer exponent"))
    } else {
        x.powf(p)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node holding a NaN or infinity, with its operation name and the
    /// offending flat index.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str, usize)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value
                .first_non_finite()
                .map(|idx| (Var(i), n.op.name(), idx))
        })
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        if let Some(index) = self.value(b).data().iter().position(|&d| d == S::zero()) {
            return Err(Error::Domain {
                op: "div",
                index,
                detail: "division by zero".into(),
            });
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::MulScalar(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -S::one())
    }

    /// Voxelwise power. Non-integer exponents need a positive base; negative
    /// integer exponents need a nonzero base.
    pub fn pow(&mut self, a: Var, p: S) -> Result<Var> {
        let x = self.value(a);
        let bad = if is_integer(p) {
            if p < S::zero() {
                x.data().iter().position(|&v| v == S::zero())
            } else {
                None
            }
        } else {
            x.data().iter().position(|&v| v <= S::zero())
        };
        if let Some(index) = bad {
            return Err(Error::Domain {
                op: "pow",
                index,
                detail: format!("base {} invalid for exponent {p}", x.data()[index]),
            });
        }
        let v = x.map(|b| pow_value(b, p));
        Ok(self.push(v, Op::Pow(a, p), &[a]))
    }

    // -- activations ---------------------------------------------------------

    /// Logistic sigmoid, kept strictly inside (0, 1) even where it saturates.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let lo = S::min_positive_value();
        let hi = S::one() - S::epsilon() / S::of(2.0);
        let v = self.value(a).map(|x| {
            let y = if x >= S::zero() {
                S::one() / (S::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::one() + e)
            };
            y.max(lo).min(hi)
        });
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let v = self
            .value(a)
            .map(|x| if x >= S::zero() { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: S) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor), &[a])
    }

    // -- spatial -------------------------------------------------------------

    pub fn conv3d(&mut self, input: Var, kernel: Var, padding: Padding, stride: usize) -> Result<Var> {
        let v = conv::conv3d(self.value(input), self.value(kernel), padding, stride)?;
        Ok(self.push(
            v,
            Op::Conv3d {
                input,
                kernel,
                padding,
                stride,
            },
            &[input, kernel],
        ))
    }

    pub fn depthwise_conv3d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let v = conv::depthwise_conv3d(self.value(input), self.value(kernel), padding)?;
        Ok(self.push(
            v,
            Op::DepthwiseConv3d {
                input,
                kernel,
                padding,
            },
            &[input, kernel],
        ))
    }

    /// Adds `bias[c]` to every voxel of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.value(bias).len() != shape[1] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} vs input {shape:?}", self.shape(bias)),
            ));
        }
        let c = shape[1];
        let m: usize = shape[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val += b[(i / m) % c];
        }
        Ok(self.push(v, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// Sliding minimum (`I(v) - w`) or maximum (`I(v) + w`) with an optional
    /// additive offset tensor of the window's shape.
    pub fn sliding_extremum(
        &mut self,
        input: Var,
        kind: ExtremumKind,
        window: [usize; 3],
        offsets: Option<Var>,
    ) -> Result<Var> {
        let v = extremum::sliding_extremum(
            self.value(input),
            kind,
            window,
            offsets.map(|o| self.value(o)),
        )?;
        let mut parents = vec![input];
        parents.extend(offsets);
        Ok(self.push(
            v,
            Op::Extremum {
                input,
                offsets,
                kind,
                window,
            },
            &parents,
        ))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: [usize; 3]) -> Result<Var> {
        let v = resample::upsample_nearest(self.value(input), factor)?;
        Ok(self.push(v, Op::Upsample { input, factor }, &[input]))
    }

    // -- channel plumbing ----------------------------------------------------

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat_channels needs at least one part"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat_channels", "parts need a channel axis"));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("non-channel extents differ: {base:?} vs {s:?}"),
                ));
            }
            channels += s[1];
        }
        let n = base[0];
        let m: usize = base[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * m);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * m..(b + 1) * c * m]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || range.start >= range.end || range.end > shape[1] {
            return Err(Error::shape(
                "slice_channels",
                format!("range {range:?} invalid for shape {shape:?}"),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let m: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * range.len() * m);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + range.start) * m..(b * c + range.end) * m]);
        }
        let mut out_shape = shape;
        out_shape[1] = range.len();
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(
            v,
            Op::Slice {
                input: x,
                start: range.start,
            },
            &[x],
        ))
    }

    // -- normalization and reductions -----------------------------------------

    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: S) -> Result<Var> {
        let (v, saved) =
            norm::instance_norm(self.value(x), self.value(scale), self.value(shift), eps)?;
        Ok(self.push(
            v,
            Op::InstanceNorm {
                input: x,
                scale,
                shift,
                saved,
            },
            &[x, scale, shift],
        ))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let v = norm::softmax_channels(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Sums over batch and spatial axes, leaving one value per channel.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("channel_sum", "input needs a channel axis"));
        }
        let c = shape[1];
        let m: usize = shape[2..].iter().product();
        let mut out = vec![S::zero(); c];
        for (i, &val) in self.value(x).data().iter().enumerate() {
            out[(i / m) % c] += val;
        }
        let v = Tensor::new(vec![c], out)?;
        Ok(self.push(v, Op::ChannelSum(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / S::of_usize(t.len()));
        self.push(v, Op::Mean(x), &[x])
    }

    // -- reverse pass ----------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that depends
    /// on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<S>,
        out: &Tensor<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gi, y| gi * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |gi, x| gi * x));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gi, y| gi / y));
                }
                if self.requires_grad(*b) {
                    let gb = Tensor::from_fn(g.shape(), |i| {
                        let y = bv.data()[i];
                        -g.data()[i] * av.data()[i] / (y * y)
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.accumulate(grads, *a, g.map(|x| x * *s)),
            Op::Pow(a, p) => {
                let x = self.value(*a);
                let p = *p;
                let ga = if p == S::zero() {
                    Tensor::zeros(g.shape())
                } else {
                    g.zip_map(x, |gi, xi| gi * p * pow_value(xi, p - S::one()))
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * y * (S::one() - y)));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let s = *slope;
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |gi, xi| if xi >= S::zero() { gi } else { gi * s }),
                );
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a);
                let f = *floor;
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |gi, xi| if xi >= f { gi } else { S::zero() }),
                );
            }
            Op::Conv3d {
                input,
                kernel,
                padding,
                stride,
            } => {
                let (gi, gk) = conv::conv3d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *padding,
                    *stride,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                )?;
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernel, gk);
                }
            }
            Op::DepthwiseConv3d {
                input,
                kernel,
                padding,
            } => {
                let (gi, gk) = conv::depthwise_conv3d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *padding,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                )?;
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernel, gk);
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let shape = g.shape();
                    let c = shape[1];
                    let m: usize = shape[2..].iter().product();
                    let mut gb = vec![S::zero(); c];
                    for (i, &v) in g.data().iter().enumerate() {
                        gb[(i / m) % c] += v;
                    }
                    let gb = Tensor::new(self.shape(*bias).to_vec(), gb)?;
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Extremum {
                input,
                offsets,
                kind,
                window,
            } => {
                let (gi, goff) = extremum::sliding_extremum_backward(
                    self.value(*input),
                    out,
                    *kind,
                    *window,
                    offsets.map(|o| self.value(o)),
                    g,
                )?;
                self.accumulate(grads, *input, gi);
                if let (Some(o), Some(go)) = (offsets, goff) {
                    self.accumulate(grads, *o, go);
                }
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let m: usize = g.shape()[2..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if self.requires_grad(*p) {
                        let mut data = Vec::with_capacity(n * c * m);
                        for b in 0..n {
                            let s = (b * total + offset) * m;
                            data.extend_from_slice(&g.data()[s..s + c * m]);
                        }
                        self.accumulate(grads, *p, Tensor::new(self.shape(*p).to_vec(), data)?);
                    }
                    offset += c;
                }
            }
            Op::Slice { input, start } => {
                let shape = self.shape(*input);
                let (n, c) = (shape[0], shape[1]);
                let m: usize = shape[2..].iter().product();
                let width = g.shape()[1];
                let mut gi = Tensor::zeros(shape);
                for b in 0..n {
                    let dst = (b * c + start) * m;
                    gi.data_mut()[dst..dst + width * m]
                        .copy_from_slice(&g.data()[b * width * m..(b + 1) * width * m]);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                saved,
            } => {
                let (gx, gs, gb) = norm::instance_norm_backward(
                    self.shape(*input),
                    self.value(*scale),
                    saved,
                    g,
                );
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *scale, gs);
                self.accumulate(grads, *shift, gb);
            }
            Op::Upsample { input, factor } => {
                let gi = resample::upsample_nearest_backward(g, self.shape(*input), *factor)?;
                self.accumulate(grads, *input, gi);
            }
            Op::Softmax(x) => {
                self.accumulate(grads, *x, norm::softmax_channels_backward(out, g));
            }
            Op::ChannelSum(x) => {
                let shape = self.shape(*x);
                let c = shape[1];
                let m: usize = shape[2..].iter().product();
                let gi = Tensor::from_fn(shape, |i| g.data()[(i / m) % c]);
                self.accumulate(grads, *x, gi);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let gv = g.data()[0] / S::of_usize(t.len());
                self.accumulate(grads, *x, Tensor::full(t.shape(), gv));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::ones(&[3]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new(vec![1], vec![4.0]).unwrap());
        let r = t.pow(a, -1.0).unwrap();
        assert_eq!(t.value(r).data(), &[0.25]);
        let img = t.constant(Tensor::from_fn(&[2, 3], |i| i as f64 + 0.5));
        let z = t.pow(img, 0.0).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v == 1.0));
        let n = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let d = t.constant(Tensor::new(vec![2], vec![2.0, 4.0]).unwrap());
        let q = t.div(n, d).unwrap();
        assert_eq!(t.value(q).data(), &[0.5, 0.5]);
    }

    #[test]
    fn domain_errors_name_first_offender() {
        let mut t = Tape::<f64>::new();
        let n = t.constant(Tensor::ones(&[3]));
        let d = t.constant(Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
        match t.div(n, d) {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected domain error, got {other:?}"),
        }
        let b = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap());
        match t.pow(b, 0.5) {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected domain error, got {other:?}"),
        }
        let s = t.constant(Tensor::ones(&[2]));
        assert!(matches!(t.add(n, s), Err(Error::Shape { .. })));
    }

    #[test]
    fn activations() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![3], vec![0.0, -50.0, 50.0]).unwrap());
        let s = t.sigmoid(x);
        let v = t.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] < 1.0);
        assert!(v[2] > 0.0 && v[2] < 1.0);
        let y = t.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let l = t.leaky_relu(y, 0.01);
        assert_eq!(t.value(l).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::from_fn(&[1, 2, 2, 2, 2], |i| i as f64));
        let b = t.param(Tensor::from_fn(&[1, 3, 2, 2, 2], |i| -(i as f64)));
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[1, 5, 2, 2, 2]);
        let s = t.slice_channels(c, 0..2).unwrap();
        assert!(t.value(s).bit_eq(t.value(a)));
        let bad = t.param(Tensor::ones(&[1, 1, 2, 2, 3]));
        assert!(t.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn instance_norm_examples() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::new(vec![1, 1, 3], vec![7.0, 7.0, 7.0]).unwrap());
        let scale = t.constant(Tensor::ones(&[1]));
        let shift = t.constant(Tensor::zeros(&[1]));
        let y = t.instance_norm(c, scale, shift, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
        let x = t.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        let y = t.instance_norm(x, scale, shift, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 1.0]);
    }
}
