//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends a node holding its output value and a record of
//! its inputs. Node ids grow monotonically, so walking ids in descending
//! order from the loss is exactly reverse topological order of the forward
//! execution. Gradients accumulate across all consumers of a node; each
//! `backward` call starts from freshly zeroed gradients (no accumulation
//! across calls).

use crate::autodiff::conv::{conv2d_backward, conv2d_forward, out_extent, ConvDims};
use crate::autodiff::rng::Rng;
use crate::autodiff::scalar::{gemm_a_bt, gemm_at_b, gemm_rowmajor, Scalar};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Forward-pass mode: training applies dropout, evaluation is identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    AddConst { x: Var },
    Sum { x: Var },
    Relu { x: Var },
    Reshape { x: Var },
    Linear { x: Var, w: Var, b: Var, n: usize, d: usize, k: usize },
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    Softmax { x: Var, n: usize, k: usize },
    CrossEntropy { logits: Var, probs: Vec<F>, onehot: Vec<F>, n: usize, k: usize },
    Mse { pred: Var, target: Var },
    Dropout { x: Var, mask: Vec<F> },
    FuseConcat { a: Var, b: Var, wa: Var, wb: Var, n: usize, d: usize },
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar read for 1-element nodes.
    pub fn item(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of `v` from the most recent `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    // ---- leaves -----------------------------------------------------

    pub fn leaf(&mut self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeLenMismatch {
                op: "leaf",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, value: F) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    // ---- elementwise ------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                dim: "elementwise operand",
                expected: self.value(a).len(),
                got: self.value(b).len(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value: Vec<F> = self.value(x).iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), value, Op::Scale { x, c }, needs)
    }

    pub fn add_const(&mut self, x: Var, c: F) -> Var {
        let value: Vec<F> = self.value(x).iter().map(|&v| v + c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), value, Op::AddConst { x }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = F::zero();
        for &v in self.value(x) {
            s = s + v;
        }
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<F> = self
            .value(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), value, Op::Relu { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::ShapeLenMismatch {
                op: "reshape",
                shape: shape.to_vec(),
                len: self.value(x).len(),
            });
        }
        let value = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }, needs))
    }

    // ---- layers -----------------------------------------------------

    /// x: (n x d) times w: (d x k) plus bias k.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                dim: "rank",
                expected: 2,
                got: if xs.len() != 2 { xs.len() } else { ws.len() },
            });
        }
        let (n, d) = (xs[0], xs[1]);
        let k = ws[1];
        if ws[0] != d {
            return Err(Error::ShapeMismatch {
                op: "linear",
                dim: "input features",
                expected: d,
                got: ws[0],
            });
        }
        if bs != [k] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                dim: "bias",
                expected: k,
                got: bs.iter().product(),
            });
        }
        let mut y = vec![F::zero(); n * k];
        gemm_rowmajor(n, d, k, F::one(), self.value(x), self.value(w), F::zero(), &mut y);
        for row in y.chunks_exact_mut(k) {
            for (v, &bv) in row.iter_mut().zip(self.value(b)) {
                *v = *v + bv;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, k], y, Op::Linear { x, w, b, n, d, k }, needs))
    }

    /// x: NCHW, w: OIHW, b: O.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "rank",
                expected: 4,
                got: if xs.len() != 4 { xs.len() } else { ws.len() },
            });
        }
        let (n, cin, h, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wi, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wi != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: cin,
                got: wi,
            });
        }
        if self.shape(b) != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "bias",
                expected: cout,
                got: self.value(b).len(),
            });
        }
        let oh = out_extent(h, kh, stride, pad).ok_or(Error::WindowTooLarge {
            op: "conv2d",
            window: kh,
            extent: h + 2 * pad,
        })?;
        let ow = out_extent(width, kw, stride, pad).ok_or(Error::WindowTooLarge {
            op: "conv2d",
            window: kw,
            extent: width + 2 * pad,
        })?;
        let dims = ConvDims {
            n,
            cin,
            h,
            w: width,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let mut y = vec![F::zero(); n * cout * oh * ow];
        conv2d_forward(self.value(x), self.value(w), self.value(b), &dims, &mut y);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            vec![n, cout, oh, ow],
            y,
            Op::Conv2d { x, w, b, dims },
            needs,
        ))
    }

    /// Max pooling over NCHW with implicit negative-infinity padding:
    /// padded positions are never selected on finite input.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d",
                dim: "rank",
                expected: 4,
                got: xs.len(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = out_extent(h, window, stride, pad).ok_or(Error::WindowTooLarge {
            op: "maxpool2d",
            window,
            extent: h + 2 * pad,
        })?;
        let ow = out_extent(w, window, stride, pad).ok_or(Error::WindowTooLarge {
            op: "maxpool2d",
            window,
            extent: w + 2 * pad,
        })?;
        let mut y = vec![F::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        let xv = self.value(x);
        let mut out_idx = 0;
        for ni in 0..n {
            for ci in 0..c {
                let plane_off = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_at = usize::MAX;
                        for ky in 0..window {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..window {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let at = plane_off + iy as usize * w + ix as usize;
                                // First occurrence wins ties.
                                if xv[at] > best {
                                    best = xv[at];
                                    best_at = at;
                                }
                            }
                        }
                        debug_assert_ne!(best_at, usize::MAX, "window entirely in padding");
                        y[out_idx] = best;
                        argmax[out_idx] = best_at as u32;
                        out_idx += 1;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, c, oh, ow], y, Op::MaxPool2d { x, argmax }, needs))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                dim: "rank",
                expected: 2,
                got: xs.len(),
            });
        }
        let (n, k) = (xs[0], xs[1]);
        let mut y = vec![F::zero(); n * k];
        softmax_rows(self.value(x), n, k, &mut y);
        let needs = self.needs(x);
        Ok(self.push(vec![n, k], y, Op::Softmax { x, n, k }, needs))
    }

    /// Mean softmax cross-entropy between logits (n x k) and one-hot
    /// labels (n x k). Fused with softmax for a stable backward.
    pub fn cross_entropy(&mut self, logits: Var, labels: Var) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                dim: "rank",
                expected: 2,
                got: ls.len(),
            });
        }
        if self.shape(labels) != ls {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                dim: "labels",
                expected: ls.iter().product(),
                got: self.value(labels).len(),
            });
        }
        let (n, k) = (ls[0], ls[1]);
        if n == 0 {
            return Err(Error::EmptyInput { op: "cross_entropy" });
        }
        let mut probs = vec![F::zero(); n * k];
        softmax_rows(self.value(logits), n, k, &mut probs);
        let onehot = self.value(labels).to_vec();
        let mut loss = F::zero();
        for row in 0..n {
            let mut p_true = F::zero();
            for j in 0..k {
                p_true = p_true + onehot[row * k + j] * probs[row * k + j];
            }
            // Clamp away from zero: a +30-logit miss would otherwise be -inf.
            let p = p_true.max(F::from_f64(1e-30));
            loss = loss - p.ln();
        }
        loss = loss / F::from_f64(n as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                onehot,
                n,
                k,
            },
            needs,
        ))
    }

    /// Mean squared error between two equal-length vectors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same_shape("mse", pred, target)?;
        let m = self.value(pred).len();
        if m == 0 {
            return Err(Error::EmptyInput { op: "mse" });
        }
        let mut s = F::zero();
        for (&p, &t) in self.value(pred).iter().zip(self.value(target)) {
            let d = p - t;
            s = s + d * d;
        }
        s = s / F::from_f64(m as f64);
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(vec![1], vec![s], Op::Mse { pred, target }, needs))
    }

    /// Inverted dropout: in train mode survivors are scaled by 1/(1-p) so
    /// evaluation is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::BadProbability {
                op: "dropout",
                value: p,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if mode == Mode::Eval || p == 0.0 {
            let value = self.value(x).to_vec();
            let needs = self.needs(x);
            let mask = vec![F::one(); value.len()];
            return Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, needs));
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| {
                if rng.next_f64() < p {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let value: Vec<F> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, needs))
    }

    /// Weighted feature concatenation: rows of `a` scaled by `wa` followed
    /// by rows of `b` scaled by `wb`. Differentiable in all four inputs.
    pub fn fuse_scaled_concat(&mut self, a: Var, b: Var, wa: Var, wb: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                dim: "rank",
                expected: 2,
                got: if sa.len() != 2 { sa.len() } else { sb.len() },
            });
        }
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                dim: "feature length",
                expected: sa[1],
                got: sb[1],
            });
        }
        for wv in [wa, wb] {
            if self.value(wv).len() != 1 {
                return Err(Error::NotScalar {
                    op: "fuse",
                    shape: self.shape(wv).to_vec(),
                });
            }
        }
        let (n, d) = (sa[0], sa[1]);
        let (va, vb) = (self.item(wa), self.item(wb));
        let mut y = vec![F::zero(); n * 2 * d];
        for row in 0..n {
            for i in 0..d {
                y[row * 2 * d + i] = va * self.value(a)[row * d + i];
                y[row * 2 * d + d + i] = vb * self.value(b)[row * d + i];
            }
        }
        let needs = self.needs(a) || self.needs(b) || self.needs(wa) || self.needs(wb);
        Ok(self.push(
            vec![n, 2 * d],
            y,
            Op::FuseConcat { a, b, wa, wb, n, d },
            needs,
        ))
    }

    // ---- backward ---------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients from any previous call
    /// are discarded first; within one call, contributions from multiple
    /// consumers accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            // Inputs always precede outputs on the tape, so splitting at
            // `id` gives mutable access to every input gradient while the
            // output gradient is read from the tail.
            let (head, tail) = self.grads.split_at_mut(id);
            let gout = tail[0].as_deref().unwrap();
            let node = &self.nodes[id];
            backprop_node(&self.nodes, node, gout, head);
        }
        Ok(())
    }
}

fn softmax_rows<F: Scalar>(x: &[F], n: usize, k: usize, y: &mut [F]) {
    for row in 0..n {
        let xr = &x[row * k..(row + 1) * k];
        let yr = &mut y[row * k..(row + 1) * k];
        let mut mx = F::neg_infinity();
        for &v in xr {
            if v > mx {
                mx = v;
            }
        }
        let mut s = F::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            let e = (v - mx).exp();
            *o = e;
            s = s + e;
        }
        let inv = F::one() / s;
        for o in yr.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// Adds `contrib` into the gradient slot of `target` (if it wants one).
fn accumulate<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    target: Var,
    contrib: impl Iterator<Item = F>,
) {
    if !nodes[target.0].needs_grad {
        return;
    }
    let slot = grads[target.0].get_or_insert_with(|| vec![F::zero(); nodes[target.0].value.len()]);
    for (g, c) in slot.iter_mut().zip(contrib) {
        *g = *g + c;
    }
}

fn grad_slot<'a, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    target: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[target.0].needs_grad {
        return None;
    }
    Some(grads[target.0].get_or_insert_with(|| vec![F::zero(); nodes[target.0].value.len()]))
}

fn backprop_node<F: Scalar>(
    nodes: &[Node<F>],
    node: &Node<F>,
    gout: &[F],
    grads: &mut [Option<Vec<F>>],
) {
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, gout.iter().copied());
            accumulate(nodes, grads, *b, gout.iter().copied());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, gout.iter().copied());
            accumulate(nodes, grads, *b, gout.iter().map(|&g| -g));
        }
        Op::Mul { a, b } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            accumulate(nodes, grads, *a, gout.iter().zip(bv).map(|(&g, &v)| g * v));
            accumulate(nodes, grads, *b, gout.iter().zip(av).map(|(&g, &v)| g * v));
        }
        Op::Scale { x, c } => {
            accumulate(nodes, grads, *x, gout.iter().map(|&g| g * *c));
        }
        Op::AddConst { x } => {
            accumulate(nodes, grads, *x, gout.iter().copied());
        }
        Op::Sum { x } => {
            let g = gout[0];
            accumulate(nodes, grads, *x, std::iter::repeat(g).take(nodes[x.0].value.len()));
        }
        Op::Relu { x } => {
            let xv = &nodes[x.0].value;
            accumulate(
                nodes,
                grads,
                *x,
                gout.iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() }),
            );
        }
        Op::Reshape { x } => {
            accumulate(nodes, grads, *x, gout.iter().copied());
        }
        Op::Linear { x, w, b, n, d, k } => {
            let (n, d, k) = (*n, *d, *k);
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                // dX = dY (n x k) * W^T (k x d)
                gemm_a_bt(n, k, d, F::one(), gout, wv, F::one(), gx);
            }
            if let Some(gw) = grad_slot(nodes, grads, *w) {
                // dW = X^T (d x n) * dY (n x k)
                gemm_at_b(d, n, k, F::one(), xv, gout, F::one(), gw);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for row in gout.chunks_exact(k) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g = *g + v;
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, dims } => {
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let mut dx = nodes[x.0].needs_grad.then(|| vec![F::zero(); xv.len()]);
            let mut dw = nodes[w.0].needs_grad.then(|| vec![F::zero(); wv.len()]);
            let mut db = nodes[b.0]
                .needs_grad
                .then(|| vec![F::zero(); nodes[b.0].value.len()]);
            conv2d_backward(
                xv,
                wv,
                dims,
                gout,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(d) = dx {
                accumulate(nodes, grads, *x, d.into_iter());
            }
            if let Some(d) = dw {
                accumulate(nodes, grads, *w, d.into_iter());
            }
            if let Some(d) = db {
                accumulate(nodes, grads, *b, d.into_iter());
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (i, &g) in gout.iter().enumerate() {
                    let at = argmax[i] as usize;
                    gx[at] = gx[at] + g;
                }
            }
        }
        Op::Softmax { x, n, k } => {
            let y = &node.value;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for row in 0..*n {
                    let yr = &y[row * k..(row + 1) * k];
                    let gr = &gout[row * k..(row + 1) * k];
                    let mut dot = F::zero();
                    for (&g, &v) in gr.iter().zip(yr) {
                        dot = dot + g * v;
                    }
                    for j in 0..*k {
                        gx[row * k + j] = gx[row * k + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            onehot,
            n,
            k,
        } => {
            let g = gout[0] / F::from_f64(*n as f64);
            accumulate(
                nodes,
                grads,
                *logits,
                probs
                    .iter()
                    .zip(onehot)
                    .take(n * k)
                    .map(|(&p, &y)| (p - y) * g),
            );
        }
        Op::Mse { pred, target } => {
            let m = nodes[pred.0].value.len();
            let scale = gout[0] * F::from_f64(2.0 / m as f64);
            let pv = &nodes[pred.0].value;
            let tv = &nodes[target.0].value;
            accumulate(
                nodes,
                grads,
                *pred,
                pv.iter().zip(tv).map(|(&p, &t)| (p - t) * scale),
            );
            accumulate(
                nodes,
                grads,
                *target,
                pv.iter().zip(tv).map(|(&p, &t)| (t - p) * scale),
            );
        }
        Op::Dropout { x, mask } => {
            accumulate(
                nodes,
                grads,
                *x,
                gout.iter().zip(mask).map(|(&g, &m)| g * m),
            );
        }
        Op::FuseConcat { a, b, wa, wb, n, d } => {
            let (n, d) = (*n, *d);
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let wav = nodes[wa.0].value[0];
            let wbv = nodes[wb.0].value[0];
            accumulate(
                nodes,
                grads,
                *a,
                (0..n * d).map(|i| gout[(i / d) * 2 * d + (i % d)] * wav),
            );
            accumulate(
                nodes,
                grads,
                *b,
                (0..n * d).map(|i| gout[(i / d) * 2 * d + d + (i % d)] * wbv),
            );
            let mut ga = F::zero();
            let mut gb = F::zero();
            for row in 0..n {
                for i in 0..d {
                    ga = ga + gout[row * 2 * d + i] * av[row * d + i];
                    gb = gb + gout[row * 2 * d + d + i] * bv[row * d + i];
                }
            }
            accumulate(nodes, grads, *wa, std::iter::once(ga));
            accumulate(nodes, grads, *wb, std::iter::once(gb));
        }
    }
}
