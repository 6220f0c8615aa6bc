//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough of its
//! inputs to run the backward rule. `backward` replays the nodes in reverse
//! recording order.

use super::kernels::{self, ConvGeom, ReducePicks};
use super::{ReduceMode, Tensor};
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
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        frames: usize,
    },
    Conv3dT3 {
        input: Var,
        kernel: Var,
    },
    Reduce {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
        picks: ReducePicks,
    },
    Abs(Var),
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    /// `a ± b`, with `b` optionally broadcast along axis 0 of `a`.
    AddSub {
        a: Var,
        b: Var,
        negate_b: bool,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    ScaleVar {
        input: Var,
        weight: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Narrow {
        input: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a hash of every branch decision (activation signs, argmax
/// positions, median picks) so a finite-difference probe can tell whether a
/// perturbation crossed a kink.
#[derive(Clone, Copy, Debug)]
struct BranchTrace(u64);

impl BranchTrace {
    fn mix(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x100_0000_01b3);
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    trace: Option<BranchTrace>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also fingerprints its branch decisions; see [`Tape::branch_signature`].
    pub fn with_branch_trace() -> Self {
        Tape {
            nodes: Vec::new(),
            trace: Some(BranchTrace(0xcbf2_9ce4_8422_2325)),
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.trace.map(|t| t.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is requested.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Convolution of `[C, H, W]` or frame-batched `[N, C, H, W]` input with a
    /// `[O, C, kh, kw]` kernel and optional `[O]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (frames, c_in, h, w) = match *xs.as_slice() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::dim(
                    0,
                    format!("conv2d input must be [C,H,W] or [N,C,H,W], got {xs:?}"),
                ))
            }
        };
        let lead = xs.len() - 3;
        let &[c_out, kc, kh, kw] = ks.as_slice() else {
            return Err(Error::dim(
                0,
                format!("conv2d kernel must be rank 4, got {ks:?}"),
            ));
        };
        if kc != c_in {
            return Err(Error::dim(
                lead,
                format!("input has {c_in} channels but kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim(lead + 1, "stride must be at least 1"));
        }
        if kh > h + 2 * padding {
            return Err(Error::dim(
                lead + 1,
                format!(
                    "kernel height {kh} exceeds padded height {}",
                    h + 2 * padding
                ),
            ));
        }
        if kw > w + 2 * padding {
            return Err(Error::dim(
                lead + 2,
                format!("kernel width {kw} exceeds padded width {}", w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::dim(
                    0,
                    format!(
                        "bias shape {:?} does not match {c_out} output channels",
                        self.shape(b)
                    ),
                ));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            frames,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut shape = xs[..lead].to_vec();
        shape.extend([c_out, geom.oh, geom.ow]);
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                frames,
            },
            needs,
        ))
    }

    /// Temporal convolution of `[n, C, H, W]` with a `[C_out, C, 3, 1, 1]`
    /// kernel, zero-padded by one frame at both ends. Output is `[n, C_out, H, W]`.
    pub fn conv3d_t3(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let &[n, c, h, w] = xs.as_slice() else {
            return Err(Error::dim(
                0,
                format!("conv3d input must be [n,C,H,W], got {xs:?}"),
            ));
        };
        let &[c_out, kc, 3, 1, 1] = ks.as_slice() else {
            return Err(Error::dim(
                0,
                format!("temporal kernel must be [C_out,C,3,1,1], got {ks:?}"),
            ));
        };
        if kc != c {
            return Err(Error::dim(
                1,
                format!("input has {c} channels but temporal kernel expects {kc}"),
            ));
        }
        let out = kernels::conv3d_t3_forward(
            n,
            c,
            c_out,
            h * w,
            self.value(input).data(),
            self.value(kernel).data(),
        );
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            Tensor {
                shape: vec![n, c_out, h, w],
                data: out,
            },
            Op::Conv3dT3 { input, kernel },
            needs,
        ))
    }

    /// Removes `axis` by mean, max (first maximum on ties) or median (average
    /// of the two middle values for even counts). Rank-1 inputs reduce to `[1]`.
    pub fn reduce(&mut self, input: Var, axis: usize, mode: ReduceMode) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim(
                axis,
                format!("axis {axis} out of range for rank {}", xs.len()),
            ));
        }
        let len = xs[axis];
        if len == 0 {
            return Err(Error::EmptyReduction { axis });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let (out, picks) =
            kernels::reduce_forward(outer, len, inner, self.value(input).data(), mode);
        if let Some(trace) = self.trace.as_mut() {
            match &picks {
                ReducePicks::Mean => {}
                ReducePicks::Max(p) => p.iter().for_each(|&i| trace.mix(i as u64)),
                ReducePicks::Median(p) => p
                    .iter()
                    .for_each(|&[a, b]| trace.mix(((a as u64) << 32) | b as u64)),
            }
        }
        let mut shape: Vec<usize> = xs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Reduce {
                input,
                outer,
                len,
                inner,
                picks,
            },
            needs,
        ))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data: Vec<f64> = x.data().iter().map(|v| v.abs()).collect();
        let shape = x.shape().to_vec();
        if let Some(mut trace) = self.trace {
            for v in self.value(input).data() {
                trace.mix(match v.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => 1,
                    Some(std::cmp::Ordering::Less) => 2,
                    _ => 3,
                });
            }
            self.trace = Some(trace);
        }
        let needs = self.needs(input);
        self.push(Tensor { shape, data }, Op::Abs(input), needs)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let x = self.value(input);
        let data: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = x.shape().to_vec();
        if let Some(mut trace) = self.trace {
            for &v in self.value(input).data() {
                trace.mix((v >= 0.0) as u64 + 5);
            }
            self.trace = Some(trace);
        }
        let needs = self.needs(input);
        self.push(
            Tensor { shape, data },
            Op::LeakyRelu { input, slope },
            needs,
        )
    }

    fn add_sub(&mut self, a: Var, b: Var, negate_b: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let broadcast = sa != sb;
        if broadcast && (sa.len() < 2 || sa[1..] != *sb) {
            return Err(Error::dim(
                0,
                format!("cannot broadcast {sb:?} against {sa:?} (only along the frame axis)"),
            ));
        }
        let sign = if negate_b { -1.0 } else { 1.0 };
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(bv.len()) {
            chunk.iter_mut().zip(bv).for_each(|(x, y)| *x += sign * y);
        }
        let shape = av.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::AddSub { a, b, negate_b }, needs))
    }

    /// `a + b`; `b` may omit the leading axis of `a` and is then broadcast along it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_sub(a, b, false)
    }

    /// `a - b` with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_sub(a, b, true)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let shape = x.shape().to_vec();
        let needs = self.needs(input);
        self.push(Tensor { shape, data }, Op::Scale { input, factor }, needs)
    }

    /// Multiplies by a recorded one-element weight.
    pub fn scale_var(&mut self, input: Var, weight: Var) -> Result<Var> {
        if self.value(weight).len() != 1 {
            return Err(Error::dim(
                0,
                format!(
                    "scale weight must hold one value, got shape {:?}",
                    self.shape(weight)
                ),
            ));
        }
        let w = self.value(weight).data()[0];
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * w).collect();
        let shape = x.shape().to_vec();
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.push(
            Tensor { shape, data },
            Op::ScaleVar { input, weight },
            needs,
        ))
    }

    /// 2×2 max pooling over the last two axes.
    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let r = xs.len();
        if r < 2 {
            return Err(Error::dim(0, "max pooling needs at least two axes"));
        }
        let (h, w) = (xs[r - 2], xs[r - 1]);
        if h % 2 != 0 {
            return Err(Error::dim(r - 2, format!("height {h} is odd")));
        }
        if w % 2 != 0 {
            return Err(Error::dim(r - 1, format!("width {w} is odd")));
        }
        let planes: usize = xs[..r - 2].iter().product();
        let (out, argmax) = kernels::max_pool2x2_forward(planes, h, w, self.value(input).data());
        if let Some(trace) = self.trace.as_mut() {
            argmax.iter().for_each(|&i| trace.mix(i as u64));
        }
        let mut shape = xs;
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let needs = self.needs(input);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MaxPool { input, argmax },
            needs,
        ))
    }

    /// `len` consecutive slices along axis 0 starting at `start`. The full
    /// range returns `input` itself.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if len == 0 || start + len > xs[0] {
            return Err(Error::dim(
                0,
                format!("cannot take {len} slices from {start} out of {}", xs[0]),
            ));
        }
        if start == 0 && len == xs[0] {
            return Ok(input);
        }
        let x = self.value(input);
        let fl = x.frame_len();
        let data = x.data()[start * fl..(start + len) * fl].to_vec();
        let mut shape = xs;
        shape[0] = len;
        let needs = self.needs(input);
        Ok(self.push(Tensor { shape, data }, Op::Narrow { input, start }, needs))
    }

    /// Concatenates along axis 0; all trailing dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim(0, "concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s[1..] != *tail {
                return Err(Error::dim(
                    1,
                    format!("cannot concat {s:?} with trailing shape {tail:?}"),
                ));
            }
            lead += s[0];
        }
        let mut data = Vec::with_capacity(lead * tail.iter().product::<usize>());
        for &v in inputs {
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor { shape, data }, Op::Concat(inputs.to_vec()), needs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape(input), needs))
    }

    /// `out[i] = input[index[i]]` over flat positions, laid out as `shape`.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(
                0,
                format!("{} gather indices cannot fill shape {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::dim(
                0,
                format!("gather index {bad} out of range for {} values", x.len()),
            ));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Gather { input, index },
            needs,
        ))
    }

    /// Propagates `seed` (the gradient of some scalar with respect to `root`)
    /// back to every leaf created with [`Tape::param`].
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(root) {
            return Err(Error::dim(
                0,
                format!(
                    "seed gradient shape {:?} does not match root shape {:?}",
                    seed.shape(),
                    self.shape(root)
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            self.backward_node(node, &up, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let up = up.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                frames,
            } => {
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let mut dk = self
                    .needs(*kernel)
                    .then(|| take_or_zeros(grads, self, *kernel));
                let mut db = bias
                    .filter(|b| self.needs(*b))
                    .map(|b| take_or_zeros(grads, self, b));
                let mut dx = self
                    .needs(*input)
                    .then(|| take_or_zeros(grads, self, *input));
                kernels::conv2d_backward(
                    geom,
                    *frames,
                    x,
                    k,
                    up,
                    dk.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                    dx.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dk {
                    grads[kernel.0] = Some(t);
                }
                if let (Some(t), Some(b)) = (db, bias) {
                    grads[b.0] = Some(t);
                }
                if let Some(t) = dx {
                    grads[input.0] = Some(t);
                }
            }
            Op::Conv3dT3 { input, kernel } => {
                let xv = self.value(*input);
                let &[n, c, h, w] = xv.shape() else {
                    unreachable!()
                };
                let c_out = self.shape(*kernel)[0];
                let mut dk = self
                    .needs(*kernel)
                    .then(|| take_or_zeros(grads, self, *kernel));
                let mut dx = self
                    .needs(*input)
                    .then(|| take_or_zeros(grads, self, *input));
                kernels::conv3d_t3_backward(
                    n,
                    c,
                    c_out,
                    h * w,
                    xv.data(),
                    self.value(*kernel).data(),
                    up,
                    dk.as_mut().map(|t| t.data_mut()),
                    dx.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dk {
                    grads[kernel.0] = Some(t);
                }
                if let Some(t) = dx {
                    grads[input.0] = Some(t);
                }
            }
            Op::Reduce {
                input,
                outer,
                len,
                inner,
                picks,
            } => {
                if self.needs(*input) {
                    let mut dx = take_or_zeros(grads, self, *input);
                    kernels::reduce_backward(*outer, *len, *inner, picks, up, dx.data_mut());
                    grads[input.0] = Some(dx);
                }
            }
            Op::Abs(input) => {
                let x = self.value(*input).data();
                accumulate(grads, self, *input, |dx| {
                    for ((d, &u), &v) in dx.iter_mut().zip(up).zip(x) {
                        // Zero is a valid subgradient at the kink.
                        if v > 0.0 {
                            *d += u;
                        } else if v < 0.0 {
                            *d -= u;
                        }
                    }
                });
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                accumulate(grads, self, *input, |dx| {
                    for ((d, &u), &v) in dx.iter_mut().zip(up).zip(x) {
                        *d += if v >= 0.0 { u } else { slope * u };
                    }
                });
            }
            Op::AddSub { a, b, negate_b } => {
                accumulate(grads, self, *a, |da| {
                    da.iter_mut().zip(up).for_each(|(d, u)| *d += u);
                });
                let sign = if *negate_b { -1.0 } else { 1.0 };
                accumulate(grads, self, *b, |db| {
                    for chunk in up.chunks(db.len()) {
                        db.iter_mut().zip(chunk).for_each(|(d, u)| *d += sign * u);
                    }
                });
            }
            Op::Scale { input, factor } => {
                accumulate(grads, self, *input, |dx| {
                    dx.iter_mut().zip(up).for_each(|(d, u)| *d += factor * u);
                });
            }
            Op::ScaleVar { input, weight } => {
                let w = self.value(*weight).data()[0];
                let x = self.value(*input).data();
                accumulate(grads, self, *input, |dx| {
                    dx.iter_mut().zip(up).for_each(|(d, u)| *d += w * u);
                });
                accumulate(grads, self, *weight, |dw| {
                    dw[0] += x.iter().zip(up).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::MaxPool { input, argmax } => {
                accumulate(grads, self, *input, |dx| {
                    for (&i, &u) in argmax.iter().zip(up) {
                        dx[i as usize] += u;
                    }
                });
            }
            Op::Narrow { input, start } => {
                let fl = self.value(*input).frame_len();
                accumulate(grads, self, *input, |dx| {
                    dx[start * fl..start * fl + up.len()]
                        .iter_mut()
                        .zip(up)
                        .for_each(|(d, u)| *d += u);
                });
            }
            Op::Concat(inputs) => {
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).len();
                    let part = &up[offset..offset + len];
                    accumulate(grads, self, v, |dx| {
                        dx.iter_mut().zip(part).for_each(|(d, u)| *d += u);
                    });
                    offset += len;
                }
            }
            Op::Reshape(input) => {
                accumulate(grads, self, *input, |dx| {
                    dx.iter_mut().zip(up).for_each(|(d, u)| *d += u);
                });
            }
            Op::Gather { input, index } => {
                accumulate(grads, self, *input, |dx| {
                    index.iter().zip(up).for_each(|(&i, u)| dx[i] += u);
                });
            }
        }
    }
}

fn take_or_zeros(grads: &mut [Option<Tensor>], tape: &Tape, v: Var) -> Tensor {
    grads[v.0]
        .take()
        .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
}

fn accumulate(grads: &mut [Option<Tensor>], tape: &Tape, v: Var, f: impl FnOnce(&mut [f64])) {
    if !tape.needs(v) {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(tape.shape(v)));
    f(g.data_mut());
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f64).sin()));
        let k = tape.param(Tensor::from_fn(&[3, 1, 3, 3], |i| (i as f64).cos()));
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        let y = tape.leaky_relu(y, 0.01);
        let z = tape.reduce(y, 0, ReduceMode::Median).unwrap();
        let g = tape.backward(z, Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(k).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.param(Tensor::full(&[2], 2.0));
        let c = tape.add(a, b).unwrap();
        let g = tape.backward(c, Tensor::full(&[2], 1.0)).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn abs_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.abs(x);
        let g = tape.backward(y, Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn median_even_splits_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![4], vec![10.0, 1.0, 3.0, 2.0]).unwrap());
        let y = tape.reduce(x, 0, ReduceMode::Median).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let g = tape.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn gather_scatters_gradient_back() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.gather(x, vec![2, 0, 2, 2], &[2, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 1.0, 3.0, 3.0]);
        let g = tape.backward(y, Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 3.0]);
        assert!(tape.gather(x, vec![3], &[1]).is_err());
        assert!(tape.gather(x, vec![0], &[2]).is_err());
    }

    #[test]
    fn max_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 5.0, 5.0]).unwrap());
        let y = tape.reduce(x, 0, ReduceMode::Max).unwrap();
        let g = tape.backward(y, Tensor::scalar(2.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 3.0));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y, Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn branch_signature_tracks_sign_flips() {
        let sig = |v: f64| {
            let mut tape = Tape::with_branch_trace();
            let x = tape.constant(Tensor::scalar(v));
            tape.leaky_relu(x, 0.01);
            tape.branch_signature().unwrap()
        };
        assert_eq!(sig(1.0), sig(2.0));
        assert_ne!(sig(1.0), sig(-1.0));
    }
}
