use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gather table for [`Tape::resample`]: for each output cell, the
/// `(input, flat cell)` pairs whose values are averaged into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResampleTaps {
    pub out_shape: (usize, usize),
    pub taps: Vec<Vec<(u16, u32)>>,
}

/// Probability clamp used by every log-domain loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannel(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvT2x {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    StopGradient,
    Threshold,
    Resample {
        inputs: Vec<Var>,
        taps: Arc<ResampleTaps>,
    },
    Bce {
        p: Var,
        target: Var,
        mask: Option<Arc<Vec<bool>>>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<u8>>,
        ignore: u8,
        count: usize,
    },
    BinaryKl {
        teacher: Var,
        student: Var,
    },
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward sweep is a single reverse pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::lit(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Softmax along the leading (channel) axis of a `[C, ...]` tensor.
    pub fn softmax_channel(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a);
        if v.shape().is_empty() || v.shape()[0] == 0 {
            return Err(mismatch("softmax_channel", v.shape(), &[]));
        }
        let c = v.shape()[0];
        let s = v.len() / c;
        let x = v.data();
        let mut out = Tensor::zeros(v.shape());
        let o = out.data_mut();
        for j in 0..s {
            let m = (0..c).map(|k| x[k * s + j]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (x[k * s + j] - m).exp();
                o[k * s + j] = e;
                z += e;
            }
            for k in 0..c {
                o[k * s + j] = o[k * s + j] / z;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxChannel(a), ng))
    }

    /// `k x k` convolution with padding `k / 2`. Input `[C_in, H, W]`, weight
    /// `[C_out, C_in, k, k]`, bias `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3
            || sw.len() != 4
            || sw[1] != si[0]
            || sw[2] != sw[3]
            || sw[2] % 2 == 0
            || sb != [sw[0]]
            || stride == 0
        {
            return Err(mismatch("conv2d", si, sw));
        }
        let geom = ConvGeom {
            c_in: si[0],
            c_out: sw[0],
            h: si[1],
            w: si[2],
            k: sw[2],
            stride,
            pad: sw[2] / 2,
        };
        if geom.h + 2 * geom.pad < geom.k || geom.w + 2 * geom.pad < geom.k {
            return Err(mismatch("conv2d", si, sw));
        }
        let mut out = Tensor::zeros(&[geom.c_out, geom.out_h(), geom.out_w()]);
        kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            out.data_mut(),
        );
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    /// 2x upsampling transposed convolution. Input `[C_in, H, W]`, weight
    /// `[C_in, C_out, 2, 2]`, bias `[C_out]`; output `[C_out, 2H, 2W]`.
    pub fn conv_transpose2x(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
    ) -> Result<Var, AutodiffError> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 4 || sw[0] != si[0] || sw[2..] != [2, 2] || sb != [sw[1]] {
            return Err(mismatch("conv_transpose2x", si, sw));
        }
        let (ci, co, h, w) = (si[0], sw[1], si[1], si[2]);
        let mut out = Tensor::zeros(&[co, 2 * h, 2 * w]);
        kernels::conv_t2x_forward(
            ci,
            co,
            h,
            w,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            out.data_mut(),
        );
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        Ok(self.push(out, Op::ConvT2x { input, weight, bias }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_usize(v.len().max(1)).unwrap();
        let s: T = v.data().iter().copied().sum::<T>() / n;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Identity in the forward pass; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// `1` where `a >= threshold`, else `0`. Piecewise constant, so no gradient.
    pub fn threshold(&mut self, a: Var, threshold: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x >= threshold { T::one() } else { T::zero() });
        self.push(out, Op::Threshold, false)
    }

    /// Gathers cells from several `[C, H, W]` inputs into a `[C, h, w]`
    /// output, averaging over the taps of each output cell. Cells without taps
    /// are zero.
    pub fn resample(
        &mut self,
        inputs: &[Var],
        taps: Arc<ResampleTaps>,
    ) -> Result<Var, AutodiffError> {
        let first = inputs
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("resample needs an input".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3 {
            return Err(mismatch("resample", &s0, &[]));
        }
        for v in inputs {
            if self.shape(*v) != s0.as_slice() {
                return Err(mismatch("resample", &s0, self.shape(*v)));
            }
        }
        let (oh, ow) = taps.out_shape;
        if taps.taps.len() != oh * ow {
            return Err(mismatch("resample", &[oh, ow], &[taps.taps.len()]));
        }
        let (c, plane) = (s0[0], s0[1] * s0[2]);
        for cell in &taps.taps {
            for &(view, idx) in cell {
                if view as usize >= inputs.len() || idx as usize >= plane {
                    return Err(AutodiffError::InvalidArgument(format!(
                        "resample tap ({view}, {idx}) out of range"
                    )));
                }
            }
        }
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let o = out.data_mut();
        for (cell, list) in taps.taps.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let inv = T::one() / T::from_usize(list.len()).unwrap();
            for ch in 0..c {
                let mut acc = T::zero();
                for &(view, idx) in list {
                    acc += self.nodes[inputs[view as usize].0].value.data()
                        [ch * plane + idx as usize];
                }
                o[ch * oh * ow + cell] = acc * inv;
            }
        }
        let ng = inputs.iter().any(|v| self.ng(*v));
        Ok(self.push(
            out,
            Op::Resample {
                inputs: inputs.to_vec(),
                taps,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy between probabilities `p` and targets of the
    /// same shape, over elements where `mask` is true. Probabilities are
    /// clamped to `[1e-7, 1 - 1e-7]`. An empty mask gives zero loss.
    pub fn bce(
        &mut self,
        p: Var,
        target: Var,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var, AutodiffError> {
        let (vp, vt) = (self.value(p), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(mismatch("bce", vp.shape(), vt.shape()));
        }
        if let Some(m) = &mask {
            if m.len() != vp.len() {
                return Err(mismatch("bce", vp.shape(), &[m.len()]));
            }
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, (&pv, &y)) in vp.data().iter().zip(vt.data()).enumerate() {
            if mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            let pc = clamp_prob(pv);
            total -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let ng = self.ng(p) || self.ng(target);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target,
                mask,
                count,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `[C, ...]` logits against per-position
    /// labels, skipping positions labelled `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<u8>>,
        ignore: u8,
    ) -> Result<Var, AutodiffError> {
        let v = self.value(logits);
        if v.shape().is_empty() || v.len() / v.shape()[0].max(1) != labels.len() {
            return Err(mismatch("cross_entropy", v.shape(), &[labels.len()]));
        }
        let c = v.shape()[0];
        let s = labels.len();
        let x = v.data();
        let mut total = T::zero();
        let mut count = 0usize;
        for (j, &lab) in labels.iter().enumerate() {
            if lab == ignore {
                continue;
            }
            if lab as usize >= c {
                return Err(AutodiffError::InvalidArgument(format!(
                    "label {lab} outside {c} classes"
                )));
            }
            let m = (0..c).map(|k| x[k * s + j]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..c).map(|k| (x[k * s + j] - m).exp()).sum::<T>().ln();
            total += lse - x[lab as usize * s + j];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
            },
            ng,
        ))
    }

    /// Mean elementwise Bernoulli KL divergence `KL(teacher || student)`.
    pub fn binary_kl(&mut self, teacher: Var, student: Var) -> Result<Var, AutodiffError> {
        let (vq, vp) = (self.value(teacher), self.value(student));
        if vq.shape() != vp.shape() {
            return Err(mismatch("binary_kl", vq.shape(), vp.shape()));
        }
        let n = T::from_usize(vq.len().max(1)).unwrap();
        let total: T = vq
            .data()
            .iter()
            .zip(vp.data())
            .map(|(&q, &p)| {
                let (q, p) = (clamp_prob(q), clamp_prob(p));
                q * (q / p).ln() + (T::one() - q) * ((T::one() - q) / (T::one() - p)).ln()
            })
            .sum();
        let ng = self.ng(teacher) || self.ng(student);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BinaryKl { teacher, student },
            ng,
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let d = self.binary("mse", a, b, |x, y| x - y)?;
        let n = T::from_usize(d.len().max(1)).unwrap();
        let loss = d.sum_squares() / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient | Op::Threshold => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // split borrows: a and b may alias
                let mut ga = self.ng(*a).then(|| Tensor::zeros(sa));
                let mut gb = self.ng(*b).then(|| Tensor::zeros(sb));
                kernels::matmul_backward(
                    m,
                    k,
                    n,
                    av,
                    bv,
                    gd,
                    ga.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = ga {
                    self.acc(grads, *a).unwrap().add_assign(&t);
                }
                if let Some(t) = gb {
                    self.acc(grads, *b).unwrap().add_assign(&t);
                }
            }
            Op::Add(a, b) => {
                if let Some(t) = self.acc(grads, *a) {
                    t.add_assign(g);
                }
                if let Some(t) = self.acc(grads, *b) {
                    t.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(t) = self.acc(grads, *a) {
                    t.add_assign(g);
                }
                if let Some(t) = self.acc(grads, *b) {
                    for (x, &y) in t.data_mut().iter_mut().zip(gd) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                if let Some(t) = self.acc(grads, *a) {
                    for ((x, &y), &w) in t.data_mut().iter_mut().zip(gd).zip(&bv) {
                        *x += y * w;
                    }
                }
                if let Some(t) = self.acc(grads, *b) {
                    for ((x, &y), &w) in t.data_mut().iter_mut().zip(gd).zip(&av) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(t) = self.acc(grads, *a) {
                    for (x, &y) in t.data_mut().iter_mut().zip(gd) {
                        *x += y * *c;
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let mask: Vec<bool> = av.iter().map(|&x| x > T::zero()).collect();
                if let Some(t) = self.acc(grads, *a) {
                    for ((x, &y), m) in t.data_mut().iter_mut().zip(gd).zip(mask) {
                        if m {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                if let Some(t) = self.acc(grads, *a) {
                    for ((x, &y), &s) in t.data_mut().iter_mut().zip(gd).zip(out) {
                        *x += y * s * (T::one() - s);
                    }
                }
            }
            Op::SoftmaxChannel(a) => {
                let y = node.value.data();
                let c = node.value.shape()[0];
                let s = y.len() / c;
                let mut dx = vec![T::zero(); y.len()];
                for j in 0..s {
                    let dot: T = (0..c).map(|k| gd[k * s + j] * y[k * s + j]).sum();
                    for k in 0..c {
                        dx[k * s + j] = y[k * s + j] * (gd[k * s + j] - dot);
                    }
                }
                if let Some(t) = self.acc(grads, *a) {
                    for (x, d) in t.data_mut().iter_mut().zip(dx) {
                        *x += d;
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let xv = self.value(*input).data();
                let wv = self.value(*weight).data();
                let mut gx = self.ng(*input).then(|| Tensor::zeros(self.shape(*input)));
                let mut gw = self.ng(*weight).then(|| Tensor::zeros(self.shape(*weight)));
                let mut gb = self.ng(*bias).then(|| Tensor::zeros(self.shape(*bias)));
                kernels::conv2d_backward(
                    geom,
                    xv,
                    wv,
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*input, gx), (*weight, gw), (*bias, gb)] {
                    if let Some(t) = t {
                        self.acc(grads, v).unwrap().add_assign(&t);
                    }
                }
            }
            Op::ConvT2x {
                input,
                weight,
                bias,
            } => {
                let si = self.shape(*input);
                let sw = self.shape(*weight);
                let (ci, co, h, w) = (si[0], sw[1], si[1], si[2]);
                let mut gx = self.ng(*input).then(|| Tensor::zeros(si));
                let mut gw = self.ng(*weight).then(|| Tensor::zeros(sw));
                let mut gb = self.ng(*bias).then(|| Tensor::zeros(self.shape(*bias)));
                kernels::conv_t2x_backward(
                    ci,
                    co,
                    h,
                    w,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*input, gx), (*weight, gw), (*bias, gb)] {
                    if let Some(t) = t {
                        self.acc(grads, v).unwrap().add_assign(&t);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(t) = self.acc(grads, *a) {
                    for (x, &y) in t.data_mut().iter_mut().zip(gd) {
                        *x += y;
                    }
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                if let Some(t) = self.acc(grads, *a) {
                    t.data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len().max(1)).unwrap();
                let s = gd[0] / n;
                if let Some(t) = self.acc(grads, *a) {
                    t.data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Resample { inputs, taps } => {
                let s0 = self.shape(inputs[0]);
                let (c, plane) = (s0[0], s0[1] * s0[2]);
                let (oh, ow) = taps.out_shape;
                let mut per_input: Vec<Option<Tensor<T>>> = inputs
                    .iter()
                    .map(|v| self.ng(*v).then(|| Tensor::zeros(s0)))
                    .collect();
                for (cell, list) in taps.taps.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let inv = T::one() / T::from_usize(list.len()).unwrap();
                    for &(view, idx) in list {
                        if let Some(t) = per_input[view as usize].as_mut() {
                            let td = t.data_mut();
                            for ch in 0..c {
                                td[ch * plane + idx as usize] += gd[ch * oh * ow + cell] * inv;
                            }
                        }
                    }
                }
                for (v, t) in inputs.iter().zip(per_input) {
                    if let Some(t) = t {
                        self.acc(grads, *v).unwrap().add_assign(&t);
                    }
                }
            }
            Op::Bce {
                p,
                target,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = gd[0] / T::from_usize(*count).unwrap();
                let pv = self.value(*p).data().to_vec();
                let tv = self.value(*target).data().to_vec();
                let on = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                if let Some(t) = self.acc(grads, *p) {
                    for (i, x) in t.data_mut().iter_mut().enumerate() {
                        if on(i) {
                            let pc = clamp_prob(pv[i]);
                            *x += scale * (pc - tv[i]) / (pc * (T::one() - pc));
                        }
                    }
                }
                if let Some(t) = self.acc(grads, *target) {
                    for (i, x) in t.data_mut().iter_mut().enumerate() {
                        if on(i) {
                            let pc = clamp_prob(pv[i]);
                            *x += scale * ((T::one() - pc).ln() - pc.ln());
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = gd[0] / T::from_usize(*count).unwrap();
                let x = self.value(*logits).data().to_vec();
                let c = self.shape(*logits)[0];
                let s = labels.len();
                if let Some(t) = self.acc(grads, *logits) {
                    let td = t.data_mut();
                    for (j, &lab) in labels.iter().enumerate() {
                        if lab == *ignore {
                            continue;
                        }
                        let m = (0..c).map(|k| x[k * s + j]).fold(T::neg_infinity(), T::max);
                        let z: T = (0..c).map(|k| (x[k * s + j] - m).exp()).sum();
                        for k in 0..c {
                            let sm = (x[k * s + j] - m).exp() / z;
                            let y = if k == lab as usize { T::one() } else { T::zero() };
                            td[k * s + j] += scale * (sm - y);
                        }
                    }
                }
            }
            Op::BinaryKl { teacher, student } => {
                let n = T::from_usize(node_len(self, *teacher).max(1)).unwrap();
                let scale = gd[0] / n;
                let qv = self.value(*teacher).data().to_vec();
                let pv = self.value(*student).data().to_vec();
                let one = T::one();
                if let Some(t) = self.acc(grads, *student) {
                    for (i, x) in t.data_mut().iter_mut().enumerate() {
                        let (q, p) = (clamp_prob(qv[i]), clamp_prob(pv[i]));
                        *x += scale * (-q / p + (one - q) / (one - p));
                    }
                }
                if let Some(t) = self.acc(grads, *teacher) {
                    for (i, x) in t.data_mut().iter_mut().enumerate() {
                        let (q, p) = (clamp_prob(qv[i]), clamp_prob(pv[i]));
                        *x += scale * ((q / p).ln() - ((one - q) / (one - p)).ln());
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = T::from_usize(node_len(self, *a).max(1)).unwrap();
                let two = T::lit(2.0);
                let diff: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| two * (x - y) * gd[0] / n)
                    .collect();
                if let Some(t) = self.acc(grads, *a) {
                    for (x, &d) in t.data_mut().iter_mut().zip(&diff) {
                        *x += d;
                    }
                }
                if let Some(t) = self.acc(grads, *b) {
                    for (x, &d) in t.data_mut().iter_mut().zip(&diff) {
                        *x -= d;
                    }
                }
            }
        }
    }
}

fn node_len<T: Scalar>(tape: &Tape<T>, v: Var) -> usize {
    tape.value(v).len()
}
