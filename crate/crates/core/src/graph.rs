//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes in execution order, so the tape itself is a
//! topological order of the computation graph. [`Tape::backward`] walks it in
//! reverse, accumulating gradients additively across fan-out. Gradients
//! persist on the tape until it is dropped; repeated backward calls without a
//! reset accumulate, matching the usual leaf-gradient convention.
//!
//! The op set is exactly what a small convolutional embedding network and the
//! pair-based losses need. Loss nodes are fused: their forward values are
//! evaluated with shifted log-sum-exp sums and their backward rules are the
//! hand-derived closed forms, which keeps both sides stable for large scale
//! factors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    BiasAdd {
        x: TensorId,
        b: TensorId,
    },
    Conv2d {
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    },
    Relu {
        x: TensorId,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    L2NormalizeRows {
        x: TensorId,
        eps: T,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    RowGram {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: T,
    },
    Sum {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    SliceFlat {
        x: TensorId,
        start: usize,
    },
    MsLoss {
        s: TensorId,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
        alpha: T,
        beta: T,
        lambda: T,
        mean_over_anchors: bool,
    },
    ContrastiveLoss {
        s: TensorId,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
        margin: T,
    },
    TripletLoss {
        s: TensorId,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
        margin: T,
    },
    LiftedLoss {
        s: TensorId,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
        margin: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> T {
        self.nodes[id.0].value.scalar_value()
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_tensor(&self, id: TensorId) -> Option<Tensor<T>> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions disagree, {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::MatMul { a, b }))
    }

    pub fn bias_add(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(b).shape() != [m] {
            return Err(Error::Dimension(format!(
                "bias_add: bias shape {:?} does not match row width {}",
                self.value(b).shape(),
                m
            )));
        }
        let xs = self.value(x).data();
        let bs = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(xs[i * m + j] + bs[j]);
            }
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::BiasAdd { x, b }))
    }

    /// `x [n,d_in] * w [d_in,d_out] + b [d_out]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xw = self.matmul(x, w)?;
        self.bias_add(xw, b)
    }

    /// Cross-correlation of `x [n,c_in,h,w]` with `kernel [c_out,c_in,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(Error::Argument("conv2d: stride must be positive".into()));
        }
        let (n, c_in, h, w) = self.value(x).dims4()?;
        let (c_out, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d: input channels disagree, x {:?} vs kernel {:?}",
                self.value(x).shape(),
                self.value(kernel).shape()
            )));
        }
        let oh = conv_extent(h, kh, stride, pad)?;
        let ow = conv_extent(w, kw, stride, pad)?;
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            (n, c_in, h, w),
            (c_out, kh, kw),
            stride,
            pad,
            (oh, ow),
        );
        let rg = self.needs(&[x, kernel]);
        Ok(self.push(
            Tensor::new(vec![n, c_out, oh, ow], out)?,
            rg,
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(&[x]);
        self.push(
            Tensor::new(shape, out).expect("relu keeps shape"),
            rg,
            Op::Relu { x },
        )
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::Dimension("global_avg_pool: empty spatial map".into()));
        }
        let xs = self.value(x).data();
        let inv = T::one() / T::from_usize(h * w);
        let mut out = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let s: T = xs[base..base + h * w].iter().copied().sum();
                out.push(s * inv);
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, rg, Op::GlobalAvgPool { x }))
    }

    /// Each row divided by `max(norm, eps)`.
    pub fn l2_normalize_rows(&mut self, x: TensorId, eps: T) -> Result<TensorId> {
        if eps <= T::zero() {
            return Err(Error::Argument("l2_normalize_rows: eps must be > 0".into()));
        }
        let (n, d) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(norm);
            let denom = if norm > eps { norm } else { eps };
            out.extend(row.iter().map(|&v| v / denom));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            rg,
            Op::L2NormalizeRows { x, eps, norms },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, stabilized by
    /// per-row max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (n, c) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::Argument(format!(
                "softmax_cross_entropy: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!(
                "softmax_cross_entropy: target {} outside [0,{})",
                bad, c
            )));
        }
        let xs = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for &v in row {
                denom = denom + (v - mx).exp();
            }
            for &v in row {
                probs.push((v - mx).exp() / denom);
            }
            total = total - (row[targets[i]] - mx - denom.ln());
        }
        let loss = total / T::from_usize(n);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `x * x^T` for a matrix of rows; the upper triangle is computed once and
    /// mirrored, so the output is exactly symmetric.
    pub fn row_gram(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i..n {
                let mut s = T::zero();
                for p in 0..d {
                    s = s + xs[i * d + p] * xs[j * d + p];
                }
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, n], out)?, rg, Op::RowGram { x }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "add: shapes disagree, {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "mul: shapes disagree, {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(&[x]);
        self.push(
            Tensor::new(shape, out).expect("scale keeps shape"),
            rg,
            Op::Scale { x, c },
        )
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} has {} elements, target {:?} needs {}",
                self.value(x).shape(),
                self.value(x).numel(),
                shape,
                numel
            )));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Reshape { x }))
    }

    /// A contiguous range of the flat buffer as a rank-1 tensor.
    pub fn slice_flat(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        if start + len > self.value(x).numel() {
            return Err(Error::Index(format!(
                "slice_flat: [{start}, {}) exceeds {} elements",
                start + len,
                self.value(x).numel()
            )));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![len], data)?, rg, Op::SliceFlat { x, start }))
    }

    // ── fused pair-loss ops (built via the loss module) ──────────────

    pub(crate) fn ms_loss_node(
        &mut self,
        s: TensorId,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
        alpha: T,
        beta: T,
        lambda: T,
        mean_over_anchors: bool,
    ) -> TensorId {
        let sv = self.value(s).data();
        let n = self.value(s).shape()[0];
        let mut total = T::zero();
        for i in 0..pos.len() {
            let row = &sv[i * n..(i + 1) * n];
            let pos_terms = lse0(pos[i].iter().map(|&l| -alpha * (row[l] - lambda)));
            let neg_terms = lse0(neg[i].iter().map(|&l| beta * (row[l] - lambda)));
            total = total + pos_terms / alpha + neg_terms / beta;
        }
        if mean_over_anchors {
            total = total / T::from_usize(pos.len().max(1));
        }
        let rg = self.needs(&[s]);
        self.push(
            Tensor::scalar(total),
            rg,
            Op::MsLoss {
                s,
                pos,
                neg,
                alpha,
                beta,
                lambda,
                mean_over_anchors,
            },
        )
    }

    pub(crate) fn contrastive_loss_node(
        &mut self,
        s: TensorId,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
        margin: T,
    ) -> TensorId {
        let sv = self.value(s).data();
        let n = self.value(s).shape()[0];
        let mut total = T::zero();
        for i in 0..pos.len() {
            let row = &sv[i * n..(i + 1) * n];
            for &l in &pos[i] {
                total = total + (T::one() - row[l]);
            }
            for &l in &neg[i] {
                let v = row[l] - margin;
                if v > T::zero() {
                    total = total + v;
                }
            }
        }
        let rg = self.needs(&[s]);
        self.push(
            Tensor::scalar(total),
            rg,
            Op::ContrastiveLoss { s, pos, neg, margin },
        )
    }

    pub(crate) fn triplet_loss_node(
        &mut self,
        s: TensorId,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
        margin: T,
    ) -> TensorId {
        let sv = self.value(s).data();
        let n = self.value(s).shape()[0];
        let mut total = T::zero();
        for i in 0..pos.len() {
            let row = &sv[i * n..(i + 1) * n];
            for &p in &pos[i] {
                for &ng in &neg[i] {
                    let v = row[ng] - row[p] + margin;
                    if v > T::zero() {
                        total = total + v;
                    }
                }
            }
        }
        let rg = self.needs(&[s]);
        self.push(
            Tensor::scalar(total),
            rg,
            Op::TripletLoss { s, pos, neg, margin },
        )
    }

    pub(crate) fn lifted_loss_node(
        &mut self,
        s: TensorId,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
        margin: T,
    ) -> TensorId {
        let sv = self.value(s).data();
        let n = self.value(s).shape()[0];
        let mut total = T::zero();
        for i in 0..pos.len() {
            if neg[i].is_empty() {
                continue;
            }
            let row = &sv[i * n..(i + 1) * n];
            let (mx, lse) = lifted_neg_lse(row, &neg[i], margin);
            let _ = mx;
            for &p in &pos[i] {
                let j = lse + (T::one() - row[p]);
                if j > T::zero() {
                    total = total + j * j;
                }
            }
        }
        let rg = self.needs(&[s]);
        self.push(
            Tensor::scalar(total),
            rg,
            Op::LiftedLoss { s, pos, neg, margin },
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Propagates `d(root)/d(node)` to every gradient-tracked node reachable
    /// from the scalar `root`, adding into any gradients already held.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut local: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        local[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gi) = local[i].take() else { continue };
            self.distribute(i, &gi, &mut local);
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gi) {
                        *a = *a + *g;
                    }
                }
                slot => *slot = Some(gi),
            }
        }
        Ok(())
    }

    fn distribute(&self, i: usize, gi: &[T], local: &mut Vec<Option<Vec<T>>>) {
        let needs = |id: TensorId| self.nodes[id.0].requires_grad;
        let numel = |id: &TensorId| self.nodes[id.0].value.numel();
        macro_rules! slot {
            ($id:expr) => {
                local[$id.0].get_or_insert_with(|| vec![T::zero(); numel($id)])
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (n, k) = self.nodes[a.0].value.dims2().unwrap();
                let m = self.nodes[b.0].value.shape()[1];
                if needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let da = slot!(a);
                    for r in 0..n {
                        let grow = &gi[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            let mut s = T::zero();
                            for j in 0..m {
                                s = s + grow[j] * brow[j];
                            }
                            da[r * k + p] = da[r * k + p] + s;
                        }
                    }
                }
                if needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let db = slot!(b);
                    for r in 0..n {
                        let grow = &gi[r * m..(r + 1) * m];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            let drow = &mut db[p * m..(p + 1) * m];
                            for j in 0..m {
                                drow[j] = drow[j] + arp * grow[j];
                            }
                        }
                    }
                }
            }
            Op::BiasAdd { x, b } => {
                let (n, m) = self.nodes[x.0].value.dims2().unwrap();
                if needs(*x) {
                    let dx = slot!(x);
                    for (d, g) in dx.iter_mut().zip(gi) {
                        *d = *d + *g;
                    }
                }
                if needs(*b) {
                    let db = slot!(b);
                    for r in 0..n {
                        for j in 0..m {
                            db[j] = db[j] + gi[r * m + j];
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
            } => {
                let dims_x = self.nodes[x.0].value.dims4().unwrap();
                let (c_out, _, kh, kw) = self.nodes[kernel.0].value.dims4().unwrap();
                let oh = self.nodes[i].value.shape()[2];
                let ow = self.nodes[i].value.shape()[3];
                let xd = self.nodes[x.0].value.data();
                let kd = self.nodes[kernel.0].value.data();
                // Borrow juggling: the two destinations live in `local`, so
                // compute into fresh buffers and add once.
                let mut dx = if needs(*x) {
                    Some(vec![T::zero(); xd.len()])
                } else {
                    None
                };
                let mut dk = if needs(*kernel) {
                    Some(vec![T::zero(); kd.len()])
                } else {
                    None
                };
                conv2d_backward(
                    gi,
                    xd,
                    kd,
                    dims_x,
                    (c_out, kh, kw),
                    *stride,
                    *pad,
                    (oh, ow),
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dxv) = dx {
                    let acc = slot!(x);
                    for (a, g) in acc.iter_mut().zip(&dxv) {
                        *a = *a + *g;
                    }
                }
                if let Some(dkv) = dk {
                    let acc = slot!(kernel);
                    for (a, g) in acc.iter_mut().zip(&dkv) {
                        *a = *a + *g;
                    }
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let xd = self.nodes[x.0].value.data();
                    let dx = slot!(x);
                    for idx in 0..gi.len() {
                        if xd[idx] > T::zero() {
                            dx[idx] = dx[idx] + gi[idx];
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if needs(*x) {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                    let inv = T::one() / T::from_usize(h * w);
                    let dx = slot!(x);
                    for b in 0..n {
                        for ch in 0..c {
                            let g = gi[b * c + ch] * inv;
                            let base = (b * c + ch) * h * w;
                            for s in 0..h * w {
                                dx[base + s] = dx[base + s] + g;
                            }
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, eps, norms } => {
                if needs(*x) {
                    let (n, d) = self.nodes[x.0].value.dims2().unwrap();
                    let yd = self.nodes[i].value.data();
                    let dx = slot!(x);
                    for r in 0..n {
                        let y = &yd[r * d..(r + 1) * d];
                        let g = &gi[r * d..(r + 1) * d];
                        if norms[r] > *eps {
                            let mut dot = T::zero();
                            for p in 0..d {
                                dot = dot + g[p] * y[p];
                            }
                            for p in 0..d {
                                dx[r * d + p] = dx[r * d + p] + (g[p] - y[p] * dot) / norms[r];
                            }
                        } else {
                            for p in 0..d {
                                dx[r * d + p] = dx[r * d + p] + g[p] / *eps;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let (n, c) = self.nodes[logits.0].value.dims2().unwrap();
                    let g = gi[0] / T::from_usize(n);
                    let dl = slot!(logits);
                    for r in 0..n {
                        for j in 0..c {
                            let one_hot = if j == targets[r] { T::one() } else { T::zero() };
                            dl[r * c + j] = dl[r * c + j] + g * (probs[r * c + j] - one_hot);
                        }
                    }
                }
            }
            Op::RowGram { x } => {
                if needs(*x) {
                    let (n, d) = self.nodes[x.0].value.dims2().unwrap();
                    let xd = self.nodes[x.0].value.data();
                    let dx = slot!(x);
                    for r in 0..n {
                        for j in 0..n {
                            let coeff = gi[r * n + j] + gi[j * n + r];
                            if coeff != T::zero() {
                                for p in 0..d {
                                    dx[r * d + p] = dx[r * d + p] + coeff * xd[j * d + p];
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    let da = slot!(a);
                    for (d, g) in da.iter_mut().zip(gi) {
                        *d = *d + *g;
                    }
                }
                if needs(*b) {
                    let db = slot!(b);
                    for (d, g) in db.iter_mut().zip(gi) {
                        *d = *d + *g;
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let da = slot!(a);
                    for idx in 0..gi.len() {
                        da[idx] = da[idx] + gi[idx] * bd[idx];
                    }
                }
                if needs(*b) {
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let db = slot!(b);
                    for idx in 0..gi.len() {
                        db[idx] = db[idx] + gi[idx] * ad[idx];
                    }
                }
            }
            Op::Scale { x, c } => {
                if needs(*x) {
                    let dx = slot!(x);
                    for idx in 0..gi.len() {
                        dx[idx] = dx[idx] + gi[idx] * *c;
                    }
                }
            }
            Op::Sum { x } => {
                if needs(*x) {
                    let g = gi[0];
                    let dx = slot!(x);
                    for d in dx.iter_mut() {
                        *d = *d + g;
                    }
                }
            }
            Op::Reshape { x } => {
                if needs(*x) {
                    let dx = slot!(x);
                    for (d, g) in dx.iter_mut().zip(gi) {
                        *d = *d + *g;
                    }
                }
            }
            Op::SliceFlat { x, start } => {
                if needs(*x) {
                    let dx = slot!(x);
                    for (off, g) in gi.iter().enumerate() {
                        dx[start + off] = dx[start + off] + *g;
                    }
                }
            }
            Op::MsLoss {
                s,
                pos,
                neg,
                alpha,
                beta,
                lambda,
                mean_over_anchors,
            } => {
                if needs(*s) {
                    let n = self.nodes[s.0].value.shape()[0];
                    let sv = self.nodes[s.0].value.data();
                    let gs = if *mean_over_anchors {
                        gi[0] / T::from_usize(pos.len().max(1))
                    } else {
                        gi[0]
                    };
                    let ds = slot!(s);
                    for r in 0..pos.len() {
                        let row = &sv[r * n..(r + 1) * n];
                        // d lse0 / d t_l = e^{t_l} / (1 + sum e^{t}), shifted by m.
                        let (m, denom) =
                            lse0_parts(pos[r].iter().map(|&l| -*alpha * (row[l] - *lambda)));
                        for &l in &pos[r] {
                            let t = -*alpha * (row[l] - *lambda);
                            let wgt = (t - m).exp() / denom;
                            ds[r * n + l] = ds[r * n + l] - gs * wgt;
                        }
                        let (m2, denom2) =
                            lse0_parts(neg[r].iter().map(|&l| *beta * (row[l] - *lambda)));
                        for &l in &neg[r] {
                            let u = *beta * (row[l] - *lambda);
                            let wgt = (u - m2).exp() / denom2;
                            ds[r * n + l] = ds[r * n + l] + gs * wgt;
                        }
                    }
                }
            }
            Op::ContrastiveLoss { s, pos, neg, margin } => {
                if needs(*s) {
                    let n = self.nodes[s.0].value.shape()[0];
                    let sv = self.nodes[s.0].value.data();
                    let g = gi[0];
                    let ds = slot!(s);
                    for r in 0..pos.len() {
                        for &l in &pos[r] {
                            ds[r * n + l] = ds[r * n + l] - g;
                        }
                        for &l in &neg[r] {
                            if sv[r * n + l] - *margin > T::zero() {
                                ds[r * n + l] = ds[r * n + l] + g;
                            }
                        }
                    }
                }
            }
            Op::TripletLoss { s, pos, neg, margin } => {
                if needs(*s) {
                    let n = self.nodes[s.0].value.shape()[0];
                    let sv = self.nodes[s.0].value.data();
                    let g = gi[0];
                    let ds = slot!(s);
                    for r in 0..pos.len() {
                        let row = &sv[r * n..(r + 1) * n];
                        for &p in &pos[r] {
                            for &ng in &neg[r] {
                                if row[ng] - row[p] + *margin > T::zero() {
                                    ds[r * n + ng] = ds[r * n + ng] + g;
                                    ds[r * n + p] = ds[r * n + p] - g;
                                }
                            }
                        }
                    }
                }
            }
            Op::LiftedLoss { s, pos, neg, margin } => {
                if needs(*s) {
                    let n = self.nodes[s.0].value.shape()[0];
                    let sv = self.nodes[s.0].value.data();
                    let g = gi[0];
                    let ds = slot!(s);
                    let two = T::from_f64(2.0);
                    for r in 0..pos.len() {
                        if neg[r].is_empty() {
                            continue;
                        }
                        let row = &sv[r * n..(r + 1) * n];
                        let (mx, lse) = lifted_neg_lse(row, &neg[r], *margin);
                        let mut esum = T::zero();
                        for &ng in &neg[r] {
                            esum = esum + (*margin - T::one() + row[ng] - mx).exp();
                        }
                        for &p in &pos[r] {
                            let j = lse + (T::one() - row[p]);
                            if j > T::zero() {
                                let dj = two * j * g;
                                ds[r * n + p] = ds[r * n + p] - dj;
                                for &ng in &neg[r] {
                                    let w = (*margin - T::one() + row[ng] - mx).exp() / esum;
                                    ds[r * n + ng] = ds[r * n + ng] + dj * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `log(1 + sum(e^t))` over an iterator of exponents, shift-stabilized.
fn lse0<T: Scalar>(terms: impl Iterator<Item = T> + Clone) -> T {
    let (m, denom) = lse0_parts(terms);
    m + denom.ln()
}

/// Shift `m = max(0, max t)` and `denom = e^{-m} + sum e^{t - m}`, so that
/// `lse0 = m + ln(denom)` and each softmax weight is `e^{t-m}/denom`.
fn lse0_parts<T: Scalar>(terms: impl Iterator<Item = T> + Clone) -> (T, T) {
    let mut m = T::zero();
    for t in terms.clone() {
        if t > m {
            m = t;
        }
    }
    let mut denom = (-m).exp();
    for t in terms {
        denom = denom + (t - m).exp();
    }
    (m, denom)
}

fn lifted_neg_lse<T: Scalar>(row: &[T], neg: &[usize], margin: T) -> (T, T) {
    let mut mx = T::neg_infinity();
    for &l in neg {
        let t = margin - T::one() + row[l];
        if t > mx {
            mx = t;
        }
    }
    let mut s = T::zero();
    for &l in neg {
        s = s + (margin - T::one() + row[l] - mx).exp();
    }
    (mx, mx + s.ln())
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Dimension(format!(
            "conv2d: extent {input} with pad {pad} is smaller than kernel {k}"
        )));
    }
    let out = (padded - k) / stride + 1;
    if out == 0 {
        return Err(Error::Dimension(format!(
            "conv2d: output extent 0 for input {input}, kernel {k}, stride {stride}, pad {pad}"
        )));
    }
    Ok(out)
}

/// Valid output range along one axis for kernel offset `k_off`: every `o` with
/// `0 <= o*stride + k_off - pad < input`.
fn conv_span(input: usize, out: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi_num = input + pad;
    if hi_num <= k_off {
        return (1, 0); // empty
    }
    let hi = ((hi_num - k_off - 1) / stride).min(out - 1);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    (n, c_in, h, w): (usize, usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c_out * oh * ow];
    for b in 0..n {
        for oc in 0..c_out {
            let obase = (b * c_out + oc) * oh * ow;
            for ic in 0..c_in {
                let xbase = (b * c_in + ic) * h * w;
                let kbase = (oc * c_in + ic) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_span(h, oh, stride, pad, ky);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = conv_span(w, ow, stride, pad, kx);
                        let wgt = kernel[kbase + ky * kw + kx];
                        if wgt == T::zero() || oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = xbase + iy * w;
                            let orow = obase + oy * ow;
                            for ox in ox_lo..=ox_hi {
                                let ix = ox * stride + kx - pad;
                                out[orow + ox] = out[orow + ox] + wgt * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    kernel: &[T],
    (n, c_in, h, w): (usize, usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    for b in 0..n {
        for oc in 0..c_out {
            let obase = (b * c_out + oc) * oh * ow;
            for ic in 0..c_in {
                let xbase = (b * c_in + ic) * h * w;
                let kbase = (oc * c_in + ic) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_span(h, oh, stride, pad, ky);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = conv_span(w, ow, stride, pad, kx);
                        if oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        let wgt = kernel[kbase + ky * kw + kx];
                        let mut wsum = T::zero();
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = xbase + iy * w;
                            let orow = obase + oy * ow;
                            for ox in ox_lo..=ox_hi {
                                let ix = ox * stride + kx - pad;
                                let g = gout[orow + ox];
                                if let Some(dxs) = dx.as_deref_mut() {
                                    dxs[xrow + ix] = dxs[xrow + ix] + g * wgt;
                                }
                                wsum = wsum + g * x[xrow + ix];
                            }
                        }
                        if let Some(dks) = dk.as_deref_mut() {
                            dks[kbase + ky * kw + kx] = dks[kbase + ky * kw + kx] + wsum;
                        }
                    }
                }
            }
        }
    }
}

/// Max over coordinates of `|analytic - central| / max(1, |analytic|, |central|)`
/// where `central` is the two-sided finite difference of `build` at step `h`.
pub fn grad_check<T, F>(build: &F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, TensorId) -> Result<TensorId>,
{
    if h <= T::zero() {
        return Err(Error::Argument("grad_check: h must be > 0".into()));
    }
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone(), true);
    let root = build(&mut tape, id)?;
    let base = tape.scalar_value(root);
    if !base.is_finite() {
        return Err(Error::Numeric(format!("grad_check: non-finite value {base}")));
    }
    tape.backward(root)?;
    let analytic = match tape.grad(id) {
        Some(g) => g.to_vec(),
        None => vec![T::zero(); x.numel()],
    };

    let eval = |data: &[T]| -> Result<T> {
        let mut t = Tape::new();
        let leaf = t.leaf(Tensor::new(x.shape().to_vec(), data.to_vec())?, false);
        let r = build(&mut t, leaf)?;
        let v = t.scalar_value(r);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: non-finite value {v}")));
        }
        Ok(v)
    };

    let mut worst = T::zero();
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let central = (fp - fm) / (h + h);
        let denom = T::one().max(analytic[i].abs()).max(central.abs());
        let err = (analytic[i] - central).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_identity_weights_pass_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0]]));
        let w = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_weights_pass_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0]]));
        let w = tape.constant(t2(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let b = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_hand_product() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0]]));
        let w = tape.constant(t2(&[&[1.0, 1.0], &[1.0, -1.0]]));
        let b = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0]]));
        let w = tape.constant(t2(&[&[1.0, 1.0], &[1.0, -1.0], &[0.0, 0.0]]));
        let b = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let err = tape.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap(),
        );
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // delta at center
        let k = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_zero_kernel_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], vec![2.0; 9]).unwrap());
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_sum_to_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_vanishing_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_sign_cases_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        // x == 0 passes zero gradient
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_identity_on_positives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.5, 1.0, 7.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn gap_constant_and_singleton_and_mean() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![5.0; 4]).unwrap());
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        let s = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![3.0, -1.0]).unwrap());
        let y = tape.global_avg_pool(s).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);

        let m = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.global_avg_pool(m).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[3.0, 4.0], &[1.0, 0.0], &[2.0, 0.0], &[200.0, 0.0]]));
        let y = tape.l2_normalize_rows(x, 1e-12).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0), &[0.6, 0.8]);
        assert_eq!(v.row(1), &[1.0, 0.0]);
        assert_eq!(v.row(2), &[1.0, 0.0]);
        assert_eq!(v.row(3), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let mut tape = Tape::new();
        let uniform = tape.constant(t2(&[&[0.0, 0.0, 0.0, 0.0]]));
        let l = tape.softmax_cross_entropy(uniform, &[2]).unwrap();
        assert!((tape.scalar_value(l) - 4.0f64.ln()).abs() < 1e-12);

        let saturated = tape.constant(t2(&[&[100.0, 0.0]]));
        let l = tape.softmax_cross_entropy(saturated, &[0]).unwrap();
        assert!(tape.scalar_value(l) < 1e-10);

        let x = tape.constant(t2(&[&[1.0, 0.0]]));
        let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.scalar_value(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 0.0]]));
        assert!(matches!(
            tape.softmax_cross_entropy(x, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap(), true);
        let root = tape.sum(x);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_norm_is_x() {
        let mut tape = Tape::new();
        let data = vec![1.5, -2.0, 0.25, 3.0];
        let x = tape.leaf(Tensor::new(vec![4], data.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let root = tape.scale(s, 0.5);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), data.as_slice());
    }

    #[test]
    fn backward_accumulates_across_fanout_and_repeat() {
        let build = |tape: &mut Tape<f64>, x: TensorId| {
            let r = tape.relu(x);
            tape.sum(r)
        };
        let x = Tensor::new(vec![3], vec![1.0, -1.0, 2.0]).unwrap();

        let mut tape = Tape::new();
        let id = tape.leaf(x.clone(), true);
        let a = build(&mut tape, id);
        let b = build(&mut tape, id);
        let root = tape.add(a, b).unwrap();
        tape.backward(root).unwrap();
        let fanout = tape.grad(id).unwrap().to_vec();

        let mut single = Tape::new();
        let id2 = single.leaf(x, true);
        let r = build(&mut single, id2);
        single.backward(r).unwrap();
        let one = single.grad(id2).unwrap().to_vec();
        let doubled: Vec<f64> = one.iter().map(|v| v * 2.0).collect();
        assert_eq!(fanout, doubled);

        // a second pass accumulates on top
        single.backward(r).unwrap();
        assert_eq!(single.grad(id2).unwrap(), doubled.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn composite_linear_relu_matches_finite_differences() {
        let build = |tape: &mut Tape<f64>, x: TensorId| -> Result<TensorId> {
            let w = tape.constant(t2(&[&[0.7, -0.3, 0.2], &[0.1, 0.9, -0.5]]));
            let b = tape.constant(Tensor::new(vec![3], vec![0.05, -0.1, 0.2]).unwrap());
            let y = tape.linear(x, w, b)?;
            let r = tape.relu(y);
            Ok(tape.sum(r))
        };
        let x = t2(&[&[0.4, -0.6], &[1.2, 0.3]]);
        let err = grad_check(&build, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn grad_check_of_sum_is_tiny() {
        let build =
            |tape: &mut Tape<f64>, x: TensorId| -> Result<TensorId> { Ok(tape.sum(x)) };
        let x = Tensor::new(vec![5], vec![0.3, -1.0, 2.0, 0.0, 4.5]).unwrap();
        let err = grad_check(&build, &x, 1e-5).unwrap();
        assert!(err < 1e-10, "max relative error {err}");
    }

    #[test]
    fn slice_flat_routes_gradient_into_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let s = tape.slice_flat(x, 1, 2).unwrap();
        let root = tape.sum(s);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let x = Tensor::new(vec![2, 8], (0..16).map(|v| v as f64 * 0.37 - 2.0).collect()).unwrap();
        let k = Tensor::new(vec![2, 2, 2, 2], (0..16).map(|v| 0.1 * v as f64).collect()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.constant(Tensor::new(vec![1, 2, 2, 4], x.data().to_vec()).unwrap());
            let ki = tape.constant(k.clone());
            let c = tape.conv2d(xi, ki, 1, 1).unwrap();
            let r = tape.relu(c);
            let p = tape.global_avg_pool(r).unwrap();
            let n = tape.l2_normalize_rows(p, 1e-12).unwrap();
            let g = tape.row_gram(n).unwrap();
            let s = tape.sum(g);
            tape.scalar_value(s)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
