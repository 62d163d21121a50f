//! Reverse-mode autodiff over a linear tape.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the backward pass. Nodes are appended in evaluation order, so walking
//! the tape backwards is a reverse topological traversal that visits each
//! node once.

use std::cell::Cell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::params::{Gradients, ParamId, ParamStore};
use crate::numeric::{probe, Real, Tensor};

thread_local! {
    static FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Deliberately corrupt the backward rule of the named op (its incoming
/// gradient is scaled by 1.5) on this thread. A negative control for the
/// gradient checker; pass `None` to restore correct behaviour.
pub fn inject_backward_fault(op: Option<&'static str>) {
    FAULT.with(|f| f.set(op));
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One bilinear tap: flat offset into a `H x W` plane and its weight.
pub type Tap<T> = (usize, T);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        cols: Vec<T>,
    },
    Relu(Var),
    Silu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    ConcatChannels(Vec<Var>),
    ConcatRows(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    Upsample2x(Var),
    BilinearGather {
        input: Var,
        batch: usize,
        taps: Vec<[Tap<T>; 4]>,
    },
    /// Scalar-valued op whose local gradient w.r.t. each input was computed
    /// during the forward pass.
    FusedScalar {
        inputs: Vec<Var>,
        local: Vec<Option<Tensor<T>>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    name: &'static str,
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    check_finite: bool,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape. Non-finite values are rejected in debug builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            check_finite: cfg!(debug_assertions),
            backward_done: false,
        }
    }

    /// A tape that saves nothing for backward; used for inference and for
    /// the frozen teacher.
    pub fn no_grad() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        probe::op(name);
        if self.check_finite && !value.all_finite() {
            return Err(Error::numeric(format!("non-finite output from {name}")));
        }
        self.nodes.push(Node {
            name,
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            name: "constant",
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Frozen parameters are stop-gradient leaves.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            name: "param",
            value: p.tensor.clone(),
            op: Op::Param(id),
            needs_grad: self.record && !p.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    /// Detached copy: same value, no gradient path.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::config(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                self.value(weight).shape(),
                self.value(input).shape()
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::config(format!(
                "conv2d bias {:?} does not match {cout} output channels",
                self.value(bias).shape()
            )));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::config(format!(
                "conv2d kernel {kh} with stride {stride} does not fit {h}x{w} padded by {padding}"
            )));
        }
        let k = kh;
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let rows = cin * k * k;
        let plane = ho * wo;
        let mut cols = vec![T::zero(); n * rows * plane];
        let x = self.value(input).data();
        for b in 0..n {
            im2col(
                &x[b * cin * h * w..(b + 1) * cin * h * w],
                cin,
                h,
                w,
                k,
                stride,
                padding,
                ho,
                wo,
                &mut cols[b * rows * plane..(b + 1) * rows * plane],
            );
        }
        let wdata = self.value(weight).data();
        let bdata = self.value(bias).data();
        let mut out = vec![T::zero(); n * cout * plane];
        for b in 0..n {
            let y = &mut out[b * cout * plane..(b + 1) * cout * plane];
            for (co, row) in y.chunks_mut(plane).enumerate() {
                row.fill(bdata[co]);
            }
            T::gemm(
                false,
                false,
                cout,
                rows,
                plane,
                T::one(),
                wdata,
                &cols[b * rows * plane..(b + 1) * rows * plane],
                T::one(),
                y,
            );
        }
        let value = Tensor::from_vec(vec![n, cout, ho, wo], out)?;
        let needs = self.any_grad(&[input, weight, bias]);
        let cols = if needs { cols } else { Vec::new() };
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.any_grad(&[x]);
        self.push("relu", value, Op::Relu(x), needs)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.any_grad(&[x]);
        self.push("silu", value, Op::Silu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.any_grad(&[a, b]);
        self.push("add", value, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let needs = self.any_grad(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let needs = self.any_grad(&[x]);
        self.push("scale", value, Op::Scale(x, c), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.any_grad(&[x]);
        self.push("sum", value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::config("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `sum_i weights[i] * terms[i]` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::config("weighted_sum expects scalar terms"));
            }
            let term = if w == T::one() { v } else { self.scale(v, w)? };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term)?,
            });
        }
        acc.ok_or_else(|| Error::config("weighted_sum of no terms"))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::config("concat of no tensors"))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut ctotal = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::config("concat_channels: batch/spatial extents differ"));
            }
            ctotal += xc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * ctotal * plane);
        for b in 0..n {
            for &x in xs {
                let c = self.value(x).shape()[1];
                data.extend_from_slice(&self.value(x).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(vec![n, ctotal, h, w], data)?;
        let needs = self.any_grad(xs);
        self.push("concat_channels", value, Op::ConcatChannels(xs.to_vec()), needs)
    }

    /// Stack rank-2 tensors (`n_i x D`) along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::config("concat of no tensors"))?;
        let d = self.row_width(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            if self.row_width(x)? != d {
                return Err(Error::config("concat_rows: row widths differ"));
            }
            rows += self.value(x).shape()[0];
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::from_vec(vec![rows, d], data)?;
        let needs = self.any_grad(xs);
        self.push("concat_rows", value, Op::ConcatRows(xs.to_vec()), needs)
    }

    fn row_width(&self, x: Var) -> Result<usize> {
        match self.value(x).shape() {
            &[_, d] => Ok(d),
            other => Err(Error::config(format!("expected rank-2 tensor, got {other:?}"))),
        }
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(vec![n, c], data)?;
        let needs = self.any_grad(&[x]);
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), needs)
    }

    /// `y = x W^T + b` with `x: N x D_in`, `W: D_out x D_in`, `b: D_out`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let din = self.row_width(input)?;
        let n = self.value(input).shape()[0];
        let (dout, wdin) = match self.value(weight).shape() {
            &[o, i] => (o, i),
            other => return Err(Error::config(format!("linear weight must be rank 2, got {other:?}"))),
        };
        if wdin != din || self.value(bias).shape() != [dout] {
            return Err(Error::config(format!(
                "linear: input width {din}, weight {:?}, bias {:?}",
                self.value(weight).shape(),
                self.value(bias).shape()
            )));
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            false,
            true,
            n,
            din,
            dout,
            T::one(),
            self.value(input).data(),
            self.value(weight).data(),
            T::one(),
            &mut out,
        );
        let value = Tensor::from_vec(vec![n, dout], out)?;
        let needs = self.any_grad(&[input, weight, bias]);
        self.push("linear", value, Op::Linear { input, weight, bias }, needs)
    }

    /// Row-wise `x / max(||x||, 1e-12)`.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let d = self.row_width(input)?;
        let eps = T::lit(L2_EPS);
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(input).len());
        for row in self.value(input).data().chunks(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / denom));
        }
        let value = Tensor::from_vec(self.value(input).shape().to_vec(), data)?;
        let needs = self.any_grad(&[input]);
        self.push("l2_normalize", value, Op::L2Normalize { input, norms }, needs)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * h * w * 4];
        for p in 0..n * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    data[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, 2 * h, 2 * w], data)?;
        let needs = self.any_grad(&[x]);
        self.push("upsample_nearest2x", value, Op::Upsample2x(x), needs)
    }

    /// Weighted 4-tap gather from image `batch` of a feature map, once per
    /// output cell and channel. Produces `1 x C x out_h x out_w`.
    pub fn bilinear_gather(
        &mut self,
        input: Var,
        batch: usize,
        taps: Vec<[Tap<T>; 4]>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if batch >= n || taps.len() != out_h * out_w {
            return Err(Error::config("bilinear_gather: bad batch index or tap count"));
        }
        if taps.iter().flatten().any(|&(off, _)| off >= h * w) {
            return Err(Error::config("bilinear_gather: tap outside the feature plane"));
        }
        let plane = h * w;
        let src = &self.value(input).data()[batch * c * plane..(batch + 1) * c * plane];
        let mut data = Vec::with_capacity(c * taps.len());
        for ch in 0..c {
            let base = &src[ch * plane..(ch + 1) * plane];
            for t in &taps {
                data.push(t.iter().fold(T::zero(), |acc, &(off, wt)| acc + wt * base[off]));
            }
        }
        let value = Tensor::from_vec(vec![1, c, out_h, out_w], data)?;
        let needs = self.any_grad(&[input]);
        self.push("bilinear_gather", value, Op::BilinearGather { input, batch, taps }, needs)
    }

    /// Record a scalar whose local gradients were computed by the caller.
    /// `local[i]`, when present, must have the shape of `inputs[i]`.
    pub fn fused_scalar(
        &mut self,
        name: &'static str,
        value: T,
        inputs: Vec<Var>,
        local: Vec<Option<Tensor<T>>>,
    ) -> Result<Var> {
        assert_eq!(inputs.len(), local.len());
        for (v, g) in inputs.iter().zip(&local) {
            if let Some(g) = g {
                assert_eq!(g.shape(), self.value(*v).shape(), "{name}: local gradient shape");
            }
        }
        let needs = inputs
            .iter()
            .zip(&local)
            .any(|(v, g)| g.is_some() && self.nodes[v.0].needs_grad);
        let local = if needs { local } else { Vec::new() };
        let inputs = if needs { inputs } else { Vec::new() };
        self.push(name, Tensor::scalar(value), Op::FusedScalar { inputs, local }, needs)
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Backpropagate from a scalar node. Gradients for non-frozen parameters
    /// reachable from `loss` are returned; frozen ones never appear.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::State("backward called twice on the same tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut params = HashMap::new();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { map: params });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match FAULT.with(|f| f.get()) {
                Some(name) if name == self.nodes[i].name => g.map(|v| v * T::lit(1.5)),
                _ => g,
            };
            self.backward_node(i, g, &mut grads, &mut params)?;
        }
        Ok(Gradients { map: params })
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut HashMap<ParamId, Tensor<T>>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match params.get_mut(id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    params.insert(*id, g);
                }
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            } => {
                let [n, cin, h, w] = self.value(*input).dims4()?;
                let [cout, _, k, _] = self.value(*weight).dims4()?;
                let [_, _, ho, wo] = node.value.dims4()?;
                let rows = cin * k * k;
                let plane = ho * wo;
                let gy = g.data();
                if self.nodes[bias.0].needs_grad {
                    let mut gb = vec![T::zero(); cout];
                    for b in 0..n {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            let off = (b * cout + co) * plane;
                            *acc = *acc + gy[off..off + plane].iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(vec![cout], gb)?);
                }
                if self.nodes[weight.0].needs_grad {
                    let mut gw = vec![T::zero(); cout * rows];
                    for b in 0..n {
                        T::gemm(
                            false,
                            true,
                            cout,
                            plane,
                            rows,
                            T::one(),
                            &gy[b * cout * plane..(b + 1) * cout * plane],
                            &cols[b * rows * plane..(b + 1) * rows * plane],
                            T::one(),
                            &mut gw,
                        );
                    }
                    let shape = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::from_vec(shape, gw)?);
                }
                if self.nodes[input.0].needs_grad {
                    let wdata = self.value(*weight).data();
                    let mut gcols = vec![T::zero(); rows * plane];
                    let mut gx = vec![T::zero(); n * cin * h * w];
                    for b in 0..n {
                        T::gemm(
                            true,
                            false,
                            rows,
                            cout,
                            plane,
                            T::one(),
                            wdata,
                            &gy[b * cout * plane..(b + 1) * cout * plane],
                            T::zero(),
                            &mut gcols,
                        );
                        col2im(
                            &gcols,
                            cin,
                            h,
                            w,
                            k,
                            *stride,
                            *padding,
                            ho,
                            wo,
                            &mut gx[b * cin * h * w..(b + 1) * cin * h * w],
                        );
                    }
                    self.accumulate(grads, *input, Tensor::from_vec(vec![n, cin, h, w], gx)?);
                }
            }
            Op::Relu(x) => {
                let gx = zip_map(&g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = zip_map(&g, self.value(*x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, zip_map(&g, self.value(*b), |gv, bv| gv * bv));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, zip_map(&g, self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::ConcatChannels(xs) => {
                let [n, ctotal, h, w] = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for x in xs {
                    let c = self.value(*x).shape()[1];
                    if self.nodes[x.0].needs_grad {
                        let mut gx = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * ctotal + offset) * plane;
                            gx.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        self.accumulate(grads, *x, Tensor::from_vec(vec![n, c, h, w], gx)?);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let d = node.value.shape()[1];
                let mut row = 0;
                for x in xs {
                    let r = self.value(*x).shape()[0];
                    if self.nodes[x.0].needs_grad {
                        let gx = g.data()[row * d..(row + r) * d].to_vec();
                        self.accumulate(grads, *x, Tensor::from_vec(vec![r, d], gx)?);
                    }
                    row += r;
                }
            }
            Op::GlobalAvgPool(x) => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let plane = h * w;
                let inv = T::one() / T::lit(plane as f64);
                let mut gx = Vec::with_capacity(n * c * plane);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                self.accumulate(grads, *x, Tensor::from_vec(vec![n, c, h, w], gx)?);
            }
            Op::Linear { input, weight, bias } => {
                let [n, dout] = [node.value.shape()[0], node.value.shape()[1]];
                let din = self.value(*input).shape()[1];
                if self.nodes[bias.0].needs_grad {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(vec![dout], gb)?);
                }
                if self.nodes[weight.0].needs_grad {
                    let mut gw = vec![T::zero(); dout * din];
                    T::gemm(true, false, dout, n, din, T::one(), g.data(), self.value(*input).data(), T::zero(), &mut gw);
                    self.accumulate(grads, *weight, Tensor::from_vec(vec![dout, din], gw)?);
                }
                if self.nodes[input.0].needs_grad {
                    let mut gx = vec![T::zero(); n * din];
                    T::gemm(false, false, n, dout, din, T::one(), g.data(), self.value(*weight).data(), T::zero(), &mut gx);
                    self.accumulate(grads, *input, Tensor::from_vec(vec![n, din], gx)?);
                }
            }
            Op::L2Normalize { input, norms } => {
                let d = node.value.shape()[1];
                let eps = T::lit(L2_EPS);
                let mut gx = Vec::with_capacity(node.value.len());
                for ((y, gy), &norm) in node.value.data().chunks(d).zip(g.data().chunks(d)).zip(norms) {
                    if norm > eps {
                        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        gx.extend(y.iter().zip(gy).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                    } else {
                        gx.extend(gy.iter().map(|&gv| gv / eps));
                    }
                }
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::from_vec(shape, gx)?);
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let mut gx = vec![T::zero(); n * c * h * w];
                let gd = g.data();
                for p in 0..n * c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let dst = (p * h + i / 2) * w + j / 2;
                            gx[dst] = gx[dst] + gd[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(vec![n, c, h, w], gx)?);
            }
            Op::BilinearGather { input, batch, taps } => {
                let [n, c, h, w] = self.value(*input).dims4()?;
                let plane = h * w;
                let mut gx = vec![T::zero(); n * c * plane];
                let cells = taps.len();
                for ch in 0..c {
                    let base = (batch * c + ch) * plane;
                    for (cell, t) in taps.iter().enumerate() {
                        let gv = g.data()[ch * cells + cell];
                        for &(off, wt) in t {
                            gx[base + off] = gx[base + off] + wt * gv;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_vec(vec![n, c, h, w], gx)?);
            }
            Op::FusedScalar { inputs, local } => {
                let up = g.item();
                for (v, lg) in inputs.iter().zip(local) {
                    if let Some(lg) = lg {
                        if self.nodes[v.0].needs_grad {
                            self.accumulate(grads, *v, lg.map(|x| x * up));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub(crate) const L2_EPS: f64 = 1e-12;

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("same shape")
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let plane = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
