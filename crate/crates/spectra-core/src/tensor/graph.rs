//! Define-by-run reverse-mode computation graph.
//!
//! A [`Graph`] is rebuilt for every batch: forward builders append nodes,
//! [`Graph::backward`] walks them once in reverse creation order (which is a
//! topological order, since inputs always precede their consumers), and leaf
//! gradients are then folded back into the owning [`ParamStore`]. A graph is
//! single-use; calling `backward` twice is an error.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{col2im_acc, conv_out_len, gemm_nn_acc, gemm_tn_acc, im2col, transpose};
use super::store::ParamStore;
use crate::real::Real;

/// Handle to a tensor inside one [`Graph`]. Only valid for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named op.
    ShapeMismatch { op: &'static str, detail: String },
    /// A non-shape argument is invalid (bad stride, empty input, ...).
    InvalidArg { op: &'static str, detail: String },
    /// `backward` requires a single-element root tensor.
    NonScalarRoot { len: usize },
    /// The graph was already consumed by a previous `backward` call.
    BackwardConsumed,
    /// Cross-entropy class index outside the logit width.
    ClassOutOfRange { index: usize, class: usize, width: usize },
    /// A gradient or parameter turned NaN/Inf during an update.
    NumericInstability { param: String },
    /// Parameter name not present in the store.
    UnknownParam { name: String },
}

impl core::fmt::Display for TensorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Self::InvalidArg { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Self::NonScalarRoot { len } => {
                write!(f, "backward: root must be a scalar, got {len} elements")
            }
            Self::BackwardConsumed => write!(f, "backward: graph already consumed"),
            Self::ClassOutOfRange {
                index,
                class,
                width,
            } => write!(
                f,
                "cross_entropy: class {class} at row {index} outside logit width {width}"
            ),
            Self::NumericInstability { param } => {
                write!(f, "numeric instability: non-finite gradient in '{param}'")
            }
            Self::UnknownParam { name } => write!(f, "unknown parameter '{name}'"),
        }
    }
}

impl core::error::Error for TensorError {}

pub type Result<T> = core::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Reshape {
        x: usize,
    },
    SelectRows {
        x: usize,
        indices: Vec<usize>,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Sigmoid {
        x: usize,
    },
    Grl {
        x: usize,
        lambda: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    SoftmaxRows {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    CrossEntropy {
        logits: usize,
        classes: Vec<usize>,
    },
    FrobeniusSq {
        a: usize,
        b: usize,
    },
    PairSqDistMean {
        z: usize,
        pairs: Vec<(usize, usize)>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
    op: Op,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// The computation graph. See the module docs for the usage contract.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(String, usize)>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op, requires_grad: bool) -> TensorId {
        let len = values.len();
        debug_assert_eq!(numel(&shape), len);
        self.nodes.push(Node {
            shape,
            values,
            grad: vec![T::ZERO; len],
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn check_len(op: &'static str, shape: &[usize], values: &[T]) -> Result<()> {
        if numel(shape) != values.len() {
            return Err(TensorError::InvalidArg {
                op,
                detail: format!("shape {shape:?} needs {} values, got {}", numel(shape), values.len()),
            });
        }
        Ok(())
    }

    /// Tensor that does not receive gradients (network input, labels).
    pub fn input(&mut self, shape: &[usize], values: Vec<T>) -> Result<TensorId> {
        Self::check_len("input", shape, &values)?;
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    /// Trainable leaf; its gradient is populated by `backward`.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>) -> Result<TensorId> {
        Self::check_len("leaf", shape, &values)?;
        Ok(self.push(shape.to_vec(), values, Op::Leaf, true))
    }

    /// Bind a named parameter from `store` as a trainable leaf. After
    /// `backward`, [`Graph::accumulate_grads`] folds the leaf gradient back
    /// into the store.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<TensorId> {
        let p = store.get(name).ok_or_else(|| TensorError::UnknownParam {
            name: String::from(name),
        })?;
        let id = self.leaf(p.shape(), p.values().to_vec())?;
        self.bindings.push((String::from(name), id.0));
        Ok(id)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> T {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ----- forward builders -------------------------------------------------

    /// 2D cross-correlation of `x` [N,C,H,W] with kernel `w` [K,C,kh,kw] and
    /// bias `b` [K].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected x[N,C,H,W], w[K,C,kh,kw], b[K]; got x{xs:?} w{ws:?} b{bs:?}"),
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != wc {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c} channels, kernel expects {wc}"),
            });
        }
        if bs[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias length {} != {k} output channels", bs[0]),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                detail: String::from("stride must be >= 1"),
            });
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            });
        }
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wd, kw, stride, pad);
        let patch = oh * ow;
        let ckk = c * kh * kw;

        let mut out = vec![T::ZERO; n * k * patch];
        let mut col = vec![T::ZERO; ckk * patch];
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let xv = &self.nodes[x.0].values;
        for s in 0..n {
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, &mut col);
            let y = &mut out[s * k * patch..(s + 1) * k * patch];
            for kk in 0..k {
                for yv in &mut y[kk * patch..(kk + 1) * patch] {
                    *yv = bv[kk];
                }
            }
            gemm_nn_acc(k, ckk, patch, wv, &col, y);
        }
        let requires = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![n, k, oh, ow],
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            requires,
        ))
    }

    /// Affine map `x`·`w` + `b` with x [N,D], w [D,M], b [M].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("expected x[N,D], w[D,M], b[M]; got x{xs:?} w{ws:?} b{bs:?}"),
            });
        }
        let (n, d) = (xs[0], xs[1]);
        let (wd, m) = (ws[0], ws[1]);
        if d != wd || bs[0] != m {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("inner dims: x has {d}, w expects {wd}; bias {} vs {m}", bs[0]),
            });
        }
        let mut out = vec![T::ZERO; n * m];
        let bv = &self.nodes[b.0].values;
        for row in out.chunks_mut(m) {
            row.copy_from_slice(bv);
        }
        gemm_nn_acc(n, d, m, &self.nodes[x.0].values, &self.nodes[w.0].values, &mut out);
        let requires = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![n, m],
            out,
            Op::Linear { x: x.0, w: w.0, b: b.0 },
            requires,
        ))
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let old = numel(self.shape(x));
        if numel(new_shape) != old {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {old} elements as {new_shape:?}"),
            });
        }
        let values = self.nodes[x.0].values.clone();
        let requires = self.rg(&[x.0]);
        Ok(self.push(new_shape.to_vec(), values, Op::Reshape { x: x.0 }, requires))
    }

    /// Gather rows of a 2D-or-higher tensor along the leading axis.
    pub fn select_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                detail: String::from("input must have a leading row axis"),
            });
        }
        let n = xs[0];
        let row = numel(&xs[1..]);
        for &i in indices {
            if i >= n {
                return Err(TensorError::InvalidArg {
                    op: "select_rows",
                    detail: format!("row index {i} out of {n}"),
                });
            }
        }
        let xv = &self.nodes[x.0].values;
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut shape = xs.clone();
        shape[0] = indices.len();
        let requires = self.rg(&[x.0]);
        Ok(self.push(
            shape,
            out,
            Op::SelectRows {
                x: x.0,
                indices: indices.to_vec(),
            },
            requires,
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<T> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        let requires = self.rg(&[x.0]);
        self.push(shape, out, Op::Relu { x: x.0 }, requires)
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        let s = T::from_f64(slope);
        let out: Vec<T> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v > T::ZERO { v } else { s * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let requires = self.rg(&[x.0]);
        self.push(shape, out, Op::LeakyRelu { x: x.0, slope }, requires)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out: Vec<T> = self.nodes[x.0].values.iter().map(|&v| sigmoid_stable(v)).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.rg(&[x.0]);
        self.push(shape, out, Op::Sigmoid { x: x.0 }, requires)
    }

    /// Gradient reversal: forward is a bit-exact copy, backward multiplies the
    /// incoming gradient by `-lambda`.
    pub fn grl(&mut self, x: TensorId, lambda: f64) -> Result<TensorId> {
        if !(lambda > 0.0) {
            return Err(TensorError::InvalidArg {
                op: "grl",
                detail: format!("lambda must be > 0, got {lambda}"),
            });
        }
        let out = self.nodes[x.0].values.clone();
        let shape = self.shape(x).to_vec();
        let requires = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::Grl { x: x.0, lambda }, requires))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, requires))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let cc = T::from_f64(c);
        let out: Vec<T> = self.nodes[x.0].values.iter().map(|&v| cc * v).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.rg(&[x.0]);
        self.push(shape, out, Op::Scale { x: x.0, c }, requires)
    }

    /// Row-wise softmax of a 2D tensor, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_rows",
                detail: format!("expected 2D logits, got {xs:?}"),
            });
        }
        let k = xs[1];
        let mut out = self.nodes[x.0].values.clone();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let requires = self.rg(&[x.0]);
        Ok(self.push(xs, out, Op::SoftmaxRows { x: x.0 }, requires))
    }

    /// Mean over all elements; returns a scalar tensor of shape [1].
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].values;
        let m = v.iter().copied().sum::<T>() / T::from_usize(v.len());
        let requires = self.rg(&[x.0]);
        self.push(vec![1], vec![m], Op::MeanAll { x: x.0 }, requires)
    }

    /// Sum over all elements; returns a scalar tensor of shape [1].
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].values;
        let s = v.iter().copied().sum::<T>();
        let requires = self.rg(&[x.0]);
        self.push(vec![1], vec![s], Op::SumAll { x: x.0 }, requires)
    }

    /// Mean squared error between equal-shape tensors; scalar output.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mse", a, b)?;
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut acc = T::ZERO;
        for (&x, &y) in av.iter().zip(bv) {
            let d = x - y;
            acc += d * d;
        }
        let out = acc / T::from_usize(av.len());
        let requires = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![1], vec![out], Op::Mse { a: a.0, b: b.0 }, requires))
    }

    /// Squared Frobenius norm of (a − b); scalar output, no normalization.
    pub fn frobenius_sq(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("frobenius_sq", a, b)?;
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut acc = T::ZERO;
        for (&x, &y) in av.iter().zip(bv) {
            let d = x - y;
            acc += d * d;
        }
        let requires = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![1], vec![acc], Op::FrobeniusSq { a: a.0, b: b.0 }, requires))
    }

    /// Mean cross-entropy of logits [N,K] against integer class targets.
    pub fn cross_entropy(&mut self, logits: TensorId, classes: &[usize]) -> Result<TensorId> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("expected 2D logits, got {xs:?}"),
            });
        }
        let (n, k) = (xs[0], xs[1]);
        if classes.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{n} logit rows vs {} targets", classes.len()),
            });
        }
        for (i, &c) in classes.iter().enumerate() {
            if c >= k {
                return Err(TensorError::ClassOutOfRange {
                    index: i,
                    class: c,
                    width: k,
                });
            }
        }
        let lv = &self.nodes[logits.0].values;
        let mut acc = T::ZERO;
        for (row, &c) in lv.chunks(k).zip(classes) {
            acc += log_sum_exp(row) - row[c];
        }
        let out = acc / T::from_usize(n);
        let requires = self.rg(&[logits.0]);
        Ok(self.push(
            vec![1],
            vec![out],
            Op::CrossEntropy {
                logits: logits.0,
                classes: classes.to_vec(),
            },
            requires,
        ))
    }

    /// Mean squared Euclidean distance over the given row pairs of z [N,D];
    /// zero (with a dead gradient) when `pairs` is empty.
    pub fn pair_sqdist_mean(&mut self, z: TensorId, pairs: &[(usize, usize)]) -> Result<TensorId> {
        let zs = self.shape(z).to_vec();
        if zs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "pair_sqdist_mean",
                detail: format!("expected 2D latent rows, got {zs:?}"),
            });
        }
        let (n, d) = (zs[0], zs[1]);
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(TensorError::InvalidArg {
                    op: "pair_sqdist_mean",
                    detail: format!("pair ({i},{j}) out of {n} rows"),
                });
            }
        }
        let zv = &self.nodes[z.0].values;
        let mut acc = T::ZERO;
        for &(i, j) in pairs {
            let zi = &zv[i * d..(i + 1) * d];
            let zj = &zv[j * d..(j + 1) * d];
            for (&a, &b) in zi.iter().zip(zj) {
                let diff = a - b;
                acc += diff * diff;
            }
        }
        let out = if pairs.is_empty() {
            T::ZERO
        } else {
            acc / T::from_usize(pairs.len())
        };
        let requires = self.rg(&[z.0]);
        Ok(self.push(
            vec![1],
            vec![out],
            Op::PairSqDistMean {
                z: z.0,
                pairs: pairs.to_vec(),
            },
            requires,
        ))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse pass from a scalar root. May be called exactly once per graph.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let len = self.nodes[root.0].values.len();
        if len != 1 {
            return Err(TensorError::NonScalarRoot { len });
        }
        self.consumed = true;
        self.nodes[root.0].grad[0] = T::ONE;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    /// Fold accumulated leaf gradients of bound parameters back into `store`.
    pub fn accumulate_grads(&self, store: &mut ParamStore<T>) {
        for (name, idx) in &self.bindings {
            if let Some(p) = store.get_mut(name) {
                for (g, &ng) in p.grad_mut().iter_mut().zip(&self.nodes[*idx].grad) {
                    *g += ng;
                }
            }
        }
    }

    fn take_grad(&mut self, idx: usize) -> Vec<T> {
        core::mem::take(&mut self.nodes[idx].grad)
    }

    fn put_grad(&mut self, idx: usize, g: Vec<T>) {
        self.nodes[idx].grad = g;
    }

    fn backward_node(&mut self, i: usize) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => self.bw_conv2d(i, x, w, b, stride, pad),
            Op::Linear { x, w, b } => self.bw_linear(i, x, w, b),
            Op::Reshape { x } => self.bw_passthrough(i, x, None),
            Op::SelectRows { x, indices } => {
                if self.nodes[x].requires_grad {
                    let g = self.take_grad(i);
                    let row = numel(&self.nodes[x].shape[1..]);
                    let mut gx = self.take_grad(x);
                    for (r, &src) in indices.iter().enumerate() {
                        let seg = &g[r * row..(r + 1) * row];
                        for (dst, &v) in gx[src * row..(src + 1) * row].iter_mut().zip(seg) {
                            *dst += v;
                        }
                    }
                    self.put_grad(x, gx);
                    self.put_grad(i, g);
                }
            }
            Op::Relu { x } => {
                if self.nodes[x].requires_grad {
                    let g = self.take_grad(i);
                    let mut gx = self.take_grad(x);
                    for ((dst, &gv), &xv) in gx.iter_mut().zip(&g).zip(&self.nodes[x].values) {
                        if xv > T::ZERO {
                            *dst += gv;
                        }
                    }
                    self.put_grad(x, gx);
                    self.put_grad(i, g);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.nodes[x].requires_grad {
                    let s = T::from_f64(slope);
                    let g = self.take_grad(i);
                    let mut gx = self.take_grad(x);
                    for ((dst, &gv), &xv) in gx.iter_mut().zip(&g).zip(&self.nodes[x].values) {
                        *dst += if xv > T::ZERO { gv } else { s * gv };
                    }
                    self.put_grad(x, gx);
                    self.put_grad(i, g);
                }
            }
            Op::Sigmoid { x } => {
                if self.nodes[x].requires_grad {
                    let g = self.take_grad(i);
                    let mut gx = self.take_grad(x);
                    for ((dst, &gv), &yv) in gx.iter_mut().zip(&g).zip(&self.nodes[i].values) {
                        *dst += gv * yv * (T::ONE - yv);
                    }
                    self.put_grad(x, gx);
                    self.put_grad(i, g);
                }
            }
            Op::Grl { x, lambda } => self.bw_passthrough(i, x, Some(-lambda)),
            Op::Add { a, b } => {
                let g = self.take_grad(i);
                for target in [a, b] {
                    if self.nodes[target].requires_grad {
                        let mut gt = self.take_grad(target);
                        for (dst, &gv) in gt.iter_mut().zip(&g) {
                            *dst += gv;
                        }
                        self.put_grad(target, gt);
                    }
                }
                self.put_grad(i, g);
            }
            Op::Scale { x, c } => self.bw_passthrough(i, x, Some(c)),
            Op::SoftmaxRows { x } => {
                if self.nodes[x].requires_grad {
                    let g = self.take_grad(i);
                    let k = self.nodes[i].shape[1];
                    let mut gx = self.take_grad(x);
                    let y = &self.nodes[i].values;
                    for r in 0..self.nodes[i].shape[0] {
                        let yr = &y[r * k..(r + 1) * k];
                        let gr = &g[r * k..(r + 1) * k];
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| yv * gv)
                            .sum::<T>();
                        for ((dst, &yv), &gv) in
                            gx[r * k..(r + 1) * k].iter_mut().zip(yr).zip(gr)
                        {
                            *dst += yv * (gv - dot);
                        }
                    }
                    self.put_grad(x, gx);
                    self.put_grad(i, g);
                }
            }
            Op::MeanAll { x } => {
                if self.nodes[x].requires_grad {
                    let g = self.nodes[i].grad[0];
                    let n = T::from_usize(self.nodes[x].values.len());
                    let gv = g / n;
                    let mut gx = self.take_grad(x);
                    for dst in gx.iter_mut() {
                        *dst += gv;
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::SumAll { x } => {
                if self.nodes[x].requires_grad {
                    let g = self.nodes[i].grad[0];
                    let mut gx = self.take_grad(x);
                    for dst in gx.iter_mut() {
                        *dst += g;
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Mse { a, b } => {
                let g = self.nodes[i].grad[0];
                let n = T::from_usize(self.nodes[a].values.len());
                let scale = (T::ONE + T::ONE) * g / n;
                self.bw_diff_pair(a, b, scale);
            }
            Op::FrobeniusSq { a, b } => {
                let g = self.nodes[i].grad[0];
                let scale = (T::ONE + T::ONE) * g;
                self.bw_diff_pair(a, b, scale);
            }
            Op::CrossEntropy { logits, classes } => {
                if self.nodes[logits].requires_grad {
                    let g = self.nodes[i].grad[0];
                    let k = self.nodes[logits].shape[1];
                    let inv_n = T::ONE / T::from_usize(classes.len());
                    let mut gx = self.take_grad(logits);
                    let lv = &self.nodes[logits].values;
                    for (r, &c) in classes.iter().enumerate() {
                        let row = &lv[r * k..(r + 1) * k];
                        let mut probs = row.to_vec();
                        softmax_in_place(&mut probs);
                        let gr = &mut gx[r * k..(r + 1) * k];
                        for (j, (dst, p)) in gr.iter_mut().zip(probs).enumerate() {
                            let ind = if j == c { T::ONE } else { T::ZERO };
                            *dst += g * inv_n * (p - ind);
                        }
                    }
                    self.put_grad(logits, gx);
                }
            }
            Op::PairSqDistMean { z, pairs } => {
                if self.nodes[z].requires_grad && !pairs.is_empty() {
                    let g = self.nodes[i].grad[0];
                    let d = self.nodes[z].shape[1];
                    let scale = (T::ONE + T::ONE) * g / T::from_usize(pairs.len());
                    let mut gz = self.take_grad(z);
                    let zv = &self.nodes[z].values;
                    for &(a, b) in &pairs {
                        for t in 0..d {
                            let diff = zv[a * d + t] - zv[b * d + t];
                            gz[a * d + t] += scale * diff;
                            gz[b * d + t] -= scale * diff;
                        }
                    }
                    self.put_grad(z, gz);
                }
            }
        }
    }

    /// Gradient of (a − b)-style reductions: d/da = +scale·(a−b), d/db = −scale·(a−b).
    fn bw_diff_pair(&mut self, a: usize, b: usize, scale: T) {
        if self.nodes[a].requires_grad {
            let mut ga = self.take_grad(a);
            {
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                for ((dst, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                    *dst += scale * (x - y);
                }
            }
            self.put_grad(a, ga);
        }
        if self.nodes[b].requires_grad {
            let mut gb = self.take_grad(b);
            {
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                for ((dst, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                    *dst -= scale * (x - y);
                }
            }
            self.put_grad(b, gb);
        }
    }

    /// Element-wise gradient copy scaled by `factor` (None = 1).
    fn bw_passthrough(&mut self, i: usize, x: usize, factor: Option<f64>) {
        if !self.nodes[x].requires_grad {
            return;
        }
        let g = self.take_grad(i);
        let mut gx = self.take_grad(x);
        match factor {
            None => {
                for (dst, &gv) in gx.iter_mut().zip(&g) {
                    *dst += gv;
                }
            }
            Some(f) => {
                let ff = T::from_f64(f);
                for (dst, &gv) in gx.iter_mut().zip(&g) {
                    *dst += ff * gv;
                }
            }
        }
        self.put_grad(x, gx);
        self.put_grad(i, g);
    }

    fn bw_conv2d(&mut self, i: usize, x: usize, w: usize, b: usize, stride: usize, pad: usize) {
        let (n, c, h, wd) = {
            let s = &self.nodes[x].shape;
            (s[0], s[1], s[2], s[3])
        };
        let (k, kh, kw) = {
            let s = &self.nodes[w].shape;
            (s[0], s[2], s[3])
        };
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wd, kw, stride, pad);
        let patch = oh * ow;
        let ckk = c * kh * kw;

        let dy = self.take_grad(i);
        let need_dx = self.nodes[x].requires_grad;
        let need_dw = self.nodes[w].requires_grad;
        let need_db = self.nodes[b].requires_grad;

        let mut dxv = if need_dx { self.take_grad(x) } else { Vec::new() };
        let mut dwv = if need_dw { self.take_grad(w) } else { Vec::new() };
        let mut dbv = if need_db { self.take_grad(b) } else { Vec::new() };

        {
            let xv = &self.nodes[x].values;
            let wv = &self.nodes[w].values;
            let mut col = vec![T::ZERO; ckk * patch];
            let mut col_t = vec![T::ZERO; ckk * patch];
            let mut dcol = vec![T::ZERO; ckk * patch];
            for s in 0..n {
                let dy_s = &dy[s * k * patch..(s + 1) * k * patch];
                if need_dw {
                    im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, &mut col);
                    transpose(ckk, patch, &col, &mut col_t);
                    gemm_nn_acc(k, patch, ckk, dy_s, &col_t, &mut dwv);
                }
                if need_db {
                    for kk in 0..k {
                        let mut acc = T::ZERO;
                        for &v in &dy_s[kk * patch..(kk + 1) * patch] {
                            acc += v;
                        }
                        dbv[kk] += acc;
                    }
                }
                if need_dx {
                    for v in dcol.iter_mut() {
                        *v = T::ZERO;
                    }
                    gemm_tn_acc(ckk, k, patch, wv, dy_s, &mut dcol);
                    col2im_acc(
                        &dcol,
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        pad,
                        &mut dxv[s * c * h * wd..(s + 1) * c * h * wd],
                    );
                }
            }
        }

        if need_dx {
            self.put_grad(x, dxv);
        }
        if need_dw {
            self.put_grad(w, dwv);
        }
        if need_db {
            self.put_grad(b, dbv);
        }
        self.put_grad(i, dy);
    }

    fn bw_linear(&mut self, i: usize, x: usize, w: usize, b: usize) {
        let (n, d) = {
            let s = &self.nodes[x].shape;
            (s[0], s[1])
        };
        let m = self.nodes[w].shape[1];
        let dy = self.take_grad(i);

        if self.nodes[x].requires_grad {
            let mut dxv = self.take_grad(x);
            {
                let wv = &self.nodes[w].values;
                let mut wt = vec![T::ZERO; d * m];
                transpose(d, m, wv, &mut wt);
                gemm_nn_acc(n, m, d, &dy, &wt, &mut dxv);
            }
            self.put_grad(x, dxv);
        }
        if self.nodes[w].requires_grad {
            let mut dwv = self.take_grad(w);
            gemm_tn_acc(d, n, m, &self.nodes[x].values, &dy, &mut dwv);
            self.put_grad(w, dwv);
        }
        if self.nodes[b].requires_grad {
            let mut dbv = self.take_grad(b);
            for row in dy.chunks(m) {
                for (dst, &v) in dbv.iter_mut().zip(row) {
                    *dst += v;
                }
            }
            self.put_grad(b, dbv);
        }
        self.put_grad(i, dy);
    }
}

fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Max-subtracted log-sum-exp of a row.
fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut mx = row[0];
    for &v in row {
        mx = mx.max(v);
    }
    let mut acc = T::ZERO;
    for &v in row {
        acc += (v - mx).exp();
    }
    mx + acc.ln()
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut acc = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        acc += *v;
    }
    for v in row.iter_mut() {
        *v = *v / acc;
    }
}
