//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass in execution order,
//! keeping the output value of each node. [`Tape::backward`] walks the nodes
//! in strict reverse order, accumulating vector-Jacobian products; nodes that
//! never reach the loss keep a zero gradient. One tape serves one forward
//! pass; concurrent mutation of a tape is not supported (tapes are cheap,
//! build a fresh one per pass).
//!
//! The op set is exactly what the models need: dense linear algebra, valid
//! (unpadded) 2-D cross-correlation, 1-D sequence convolution with max
//! pooling, pointwise nonlinearities, a numerically stable log-softmax, and
//! the indexing/stacking glue for set-softmax losses. No broadcasting beyond
//! the listed ops, no mixed precision.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{shape_str, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
    },
    SeqConv {
        seq: NodeId,
        kernels: NodeId,
        width: usize,
    },
    RowMax(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    MeanVectors(Vec<NodeId>),
    Concat(Vec<NodeId>),
    StackScalars(Vec<NodeId>),
    Element(NodeId, usize),
    Clamp(NodeId, f64, f64),
    Reshape(NodeId),
    AddChannelBias(NodeId, NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    param: Option<ParamId>,
}

/// Gradients keyed by parameter, produced by [`Tape::backward`].
pub struct Gradients {
    per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter, or `None` if it never reached the loss.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param[id.index()].as_ref()
    }

    /// Gradient of a parameter, materializing zeros for disconnected ones.
    pub fn get_or_zeros(&self, params: &ParamSet, id: ParamId) -> Tensor {
        match &self.per_param[id.index()] {
            Some(t) => t.clone(),
            None => Tensor::zeros(params.get(id).shape()),
        }
    }
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    bound: Vec<Option<NodeId>>,
    macs: u64,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: vec![None; params.len()],
            macs: 0,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every matmul/matvec/dot/conv recorded so
    /// far. Pointwise ops and reductions are not counted.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, op: Op, value: Tensor, param: Option<ParamId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, param });
        id
    }

    /// Leaf holding a constant value; no gradient is reported for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, None)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a parameter. Binding the same parameter twice returns
    /// the same node, so fan-out accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.index()] {
            return n;
        }
        let n = self.push(Op::Leaf, self.params.get(id).clone(), Some(id));
        self.bound[id.index()] = Some(n);
        n
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape_str(sa),
                rhs: shape_str(sb),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), t, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), t, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), t, None))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let t = self.value(a).map(|v| v * k);
        self.push(Op::Scale(a, k), t, None)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let t = self.value(a).map(|v| v + k);
        self.push(Op::AddScalar(a), t, None)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: shape_str(sa),
                rhs: shape_str(sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aval = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aval * db[p * n + j];
                }
            }
        }
        self.macs += (m * k * n) as u64;
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::Matmul(a, b), t, None))
    }

    /// Matrix-vector product: `[m,k] x [k] -> [m]`.
    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (sa, sx) = (self.value(a).shape(), self.value(x).shape());
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: shape_str(sa),
                rhs: shape_str(sx),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (da, dx) = (self.value(a).data(), self.value(x).data());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &da[i * k..(i + 1) * k];
            out[i] = row.iter().zip(dx).map(|(w, v)| w * v).sum();
        }
        self.macs += (m * k) as u64;
        let t = Tensor::new(vec![m], out)?;
        Ok(self.push(Op::MatVec(a, x), t, None))
    }

    /// Inner product of two equal-length vectors; scalar output.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sa != sb {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: shape_str(sa),
                rhs: shape_str(sb),
            });
        }
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.macs += sa[0] as u64;
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(v), None))
    }

    /// Valid (unpadded) 2-D cross-correlation.
    /// Input `[C,H,W]`, kernels `[F,C,h,w]`, output `[F,H',W']` with
    /// `H' = (H-h)/stride + 1` (floor), same for `W'`.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, stride: usize) -> Result<NodeId> {
        let (si, sk) = (self.value(input).shape(), self.value(kernels).shape());
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: shape_str(si),
                rhs: shape_str(sk),
            });
        }
        debug_assert!(stride >= 1);
        let (c, h, w) = (si[0], si[1], si[2]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h || kw > w {
            return Err(Error::KernelTooLarge {
                kernel: shape_str(sk),
                input: shape_str(si),
            });
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let (din, dk) = (self.value(input).data(), self.value(kernels).data());
        let mut out = vec![0.0; f * ho * wo];
        for fi in 0..f {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            let irow = (ci * h + y * stride + i) * w + x * stride;
                            let krow = ((fi * c + ci) * kh + i) * kw;
                            for j in 0..kw {
                                acc += din[irow + j] * dk[krow + j];
                            }
                        }
                    }
                    out[(fi * ho + y) * wo + x] = acc;
                }
            }
        }
        self.macs += (f * c * kh * kw * ho * wo) as u64;
        let t = Tensor::new(vec![f, ho, wo], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                stride,
            },
            t,
            None,
        ))
    }

    /// 1-D convolution over a token/feature sequence.
    /// Sequence `[L,E]`, kernels `[F, width*E]` (each row is a flattened
    /// window filter), output `[F, L-width+1]`.
    pub fn seq_conv(&mut self, seq: NodeId, kernels: NodeId, width: usize) -> Result<NodeId> {
        let (ss, sk) = (self.value(seq).shape(), self.value(kernels).shape());
        if ss.len() != 2 || sk.len() != 2 || sk[1] != width * ss[1] || ss[0] < width {
            return Err(Error::ShapeMismatch {
                op: "seq_conv",
                lhs: shape_str(ss),
                rhs: shape_str(sk),
            });
        }
        let (l, e) = (ss[0], ss[1]);
        let f = sk[0];
        let p = l - width + 1;
        let (dseq, dk) = (self.value(seq).data(), self.value(kernels).data());
        let mut out = vec![0.0; f * p];
        for fi in 0..f {
            let krow = &dk[fi * width * e..(fi + 1) * width * e];
            for pos in 0..p {
                let window = &dseq[pos * e..(pos + width) * e];
                out[fi * p + pos] = krow.iter().zip(window).map(|(a, b)| a * b).sum();
            }
        }
        self.macs += (f * width * e * p) as u64;
        let t = Tensor::new(vec![f, p], out)?;
        Ok(self.push(
            Op::SeqConv {
                seq,
                kernels,
                width,
            },
            t,
            None,
        ))
    }

    /// Max over each row of a `[F,P]` matrix, output `[F]`. Ties route the
    /// gradient to the first maximal position.
    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "row_max",
                lhs: shape_str(s),
                rhs: "FxP with P >= 1".to_string(),
            });
        }
        let (f, p) = (s[0], s[1]);
        let d = self.value(a).data();
        let out: Vec<f64> = (0..f)
            .map(|r| d[r * p..(r + 1) * p].iter().copied().fold(f64::MIN, f64::max))
            .collect();
        let t = Tensor::new(vec![f], out)?;
        Ok(self.push(Op::RowMax(a), t, None))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), t, None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(a), t, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), t, None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), t, None)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), t, None)
    }

    /// `x - logsumexp(x)` over a vector, computed with max subtraction so
    /// that inputs of magnitude 1e3 stay finite. `exp(output)` sums to 1 to
    /// within 1e-12.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "log_softmax",
                lhs: shape_str(s),
                rhs: "non-empty vector".to_string(),
            });
        }
        let d = self.value(a).data();
        let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let t = Tensor::new(s.to_vec(), d.iter().map(|v| v - lse).collect())?;
        Ok(self.push(Op::LogSoftmax(a), t, None))
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(v), None)
    }

    /// Arithmetic mean of same-shaped tensors.
    pub fn mean_vectors(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        for &x in &xs[1..] {
            self.same_shape("mean_vectors", xs[0], x)?;
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for &x in xs {
            for (o, v) in out.iter_mut().zip(self.value(x).data()) {
                *o += v;
            }
        }
        let k = xs.len() as f64;
        for o in &mut out {
            *o /= k;
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::MeanVectors(xs.to_vec()), t, None))
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut out = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.shape().len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: shape_str(v.shape()),
                    rhs: "vector".to_string(),
                });
            }
            out.extend_from_slice(v.data());
        }
        let t = Tensor::vector(out);
        Ok(self.push(Op::Concat(xs.to_vec()), t, None))
    }

    /// Stacks scalars into a vector.
    pub fn stack_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            if !v.is_scalar() {
                return Err(Error::ShapeMismatch {
                    op: "stack_scalars",
                    lhs: shape_str(v.shape()),
                    rhs: "scalar".to_string(),
                });
            }
            out.push(v.item());
        }
        let t = Tensor::vector(out);
        Ok(self.push(Op::StackScalars(xs.to_vec()), t, None))
    }

    /// Extracts one element of a vector as a scalar.
    pub fn element(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "element",
                lhs: shape_str(v.shape()),
                rhs: "vector".to_string(),
            });
        }
        if i >= v.len() {
            return Err(Error::IndexOutOfRange {
                what: "element",
                index: i,
                len: v.len(),
            });
        }
        let t = Tensor::scalar(v.data()[i]);
        Ok(self.push(Op::Element(a, i), t, None))
    }

    /// Clamps elementwise to `[lo, hi]`; gradient is passed through inside
    /// the range (inclusive) and zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), t, None)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        let n: usize = shape.iter().product();
        if n != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: shape_str(v.shape()),
                rhs: shape_str(shape),
            });
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.push(Op::Reshape(a), t, None))
    }

    /// Flattens to a vector.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    /// Adds a per-channel bias over the leading axis: `[F, ...] + [F]`.
    pub fn add_channel_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.is_empty() || sb.len() != 1 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: shape_str(sa),
                rhs: shape_str(sb),
            });
        }
        let f = sa[0];
        let per = self.value(a).len() / f;
        let mut out = self.value(a).data().to_vec();
        let db = self.value(bias).data();
        for (fi, b) in db.iter().enumerate().take(f) {
            for v in &mut out[fi * per..(fi + 1) * per] {
                *v += b;
            }
        }
        let t = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(Op::AddChannelBias(a, bias), t, None))
    }

    /// Gathers rows of an embedding table `[V,E]` by token id, output `[L,E]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: shape_str(s),
                rhs: "VxE table".to_string(),
            });
        }
        let (v, e) = (s[0], s[1]);
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    what: "embedding",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(&d[id * e..(id + 1) * e]);
        }
        let t = Tensor::new(vec![ids.len(), e], out)?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
            None,
        ))
    }

    /// `W x + b` for a `[m,k]` weight, `[k]` input, `[m]` bias.
    pub fn affine(&mut self, w: ParamId, b: ParamId, x: NodeId) -> Result<NodeId> {
        let wn = self.param(w);
        let bn = self.param(b);
        let mx = self.matvec(wn, x)?;
        self.add(mx, bn)
    }

    /// Backpropagates from a scalar loss node. Returns per-parameter
    /// gradients; parameters that do not reach the loss report `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: shape_str(lv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut per_param: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for i in (0..=loss.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        acc_opt(&mut per_param[pid.index()], &go);
                    }
                }
                Op::Add(a, b) => {
                    acc_into(&mut grads, *a, self, |_| go.clone());
                    acc_into(&mut grads, *b, self, |_| go.clone());
                }
                Op::Sub(a, b) => {
                    acc_into(&mut grads, *a, self, |_| go.clone());
                    acc_into(&mut grads, *b, self, |_| go.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    acc_into(&mut grads, *a, self, |_| zip_mul(&go, &vb));
                    acc_into(&mut grads, *b, self, |_| zip_mul(&go, &va));
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc_into(&mut grads, *a, self, |_| go.map(|v| v * k));
                }
                Op::AddScalar(a) => {
                    acc_into(&mut grads, *a, self, |_| go.clone());
                }
                Op::Matmul(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (da, db) = (self.value(*a).data(), self.value(*b).data());
                    let g = go.data();
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += gv * db[p * n + j];
                            }
                        }
                    }
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = da[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    acc_into(&mut grads, *a, self, |_| {
                        Tensor::new(vec![m, k], ga.clone()).expect("shape")
                    });
                    acc_into(&mut grads, *b, self, |_| {
                        Tensor::new(vec![k, n], gb.clone()).expect("shape")
                    });
                }
                Op::MatVec(a, x) => {
                    let sa = self.value(*a).shape();
                    let (m, k) = (sa[0], sa[1]);
                    let (da, dx) = (self.value(*a).data(), self.value(*x).data());
                    let g = go.data();
                    let mut ga = vec![0.0; m * k];
                    let mut gx = vec![0.0; k];
                    for i in 0..m {
                        let gv = g[i];
                        for p in 0..k {
                            ga[i * k + p] += gv * dx[p];
                            gx[p] += gv * da[i * k + p];
                        }
                    }
                    acc_into(&mut grads, *a, self, |_| {
                        Tensor::new(vec![m, k], ga.clone()).expect("shape")
                    });
                    acc_into(&mut grads, *x, self, |_| {
                        Tensor::new(vec![k], gx.clone()).expect("shape")
                    });
                }
                Op::Dot(a, b) => {
                    let gv = go.item();
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    acc_into(&mut grads, *a, self, |_| vb.map(|v| v * gv));
                    acc_into(&mut grads, *b, self, |_| va.map(|v| v * gv));
                }
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                } => {
                    let si = self.value(*input).shape().to_vec();
                    let sk = self.value(*kernels).shape().to_vec();
                    let (c, h, w) = (si[0], si[1], si[2]);
                    let (f, kh, kw) = (sk[0], sk[2], sk[3]);
                    let so = node.value.shape();
                    let (ho, wo) = (so[1], so[2]);
                    let (din, dk) = (self.value(*input).data(), self.value(*kernels).data());
                    let g = go.data();
                    let mut gi = vec![0.0; c * h * w];
                    let mut gk = vec![0.0; f * c * kh * kw];
                    for fi in 0..f {
                        for y in 0..ho {
                            for x in 0..wo {
                                let gv = g[(fi * ho + y) * wo + x];
                                for ci in 0..c {
                                    for i in 0..kh {
                                        let irow = (ci * h + y * stride + i) * w + x * stride;
                                        let krow = ((fi * c + ci) * kh + i) * kw;
                                        for j in 0..kw {
                                            gi[irow + j] += gv * dk[krow + j];
                                            gk[krow + j] += gv * din[irow + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc_into(&mut grads, *input, self, |_| {
                        Tensor::new(si.clone(), gi.clone()).expect("shape")
                    });
                    acc_into(&mut grads, *kernels, self, |_| {
                        Tensor::new(sk.clone(), gk.clone()).expect("shape")
                    });
                }
                Op::SeqConv {
                    seq,
                    kernels,
                    width,
                } => {
                    let ss = self.value(*seq).shape().to_vec();
                    let sk = self.value(*kernels).shape().to_vec();
                    let (l, e) = (ss[0], ss[1]);
                    let f = sk[0];
                    let p = l - width + 1;
                    let (dseq, dk) = (self.value(*seq).data(), self.value(*kernels).data());
                    let g = go.data();
                    let mut gs = vec![0.0; l * e];
                    let mut gk = vec![0.0; f * width * e];
                    for fi in 0..f {
                        for pos in 0..p {
                            let gv = g[fi * p + pos];
                            for i in 0..(width * e) {
                                gs[pos * e + i] += gv * dk[fi * width * e + i];
                                gk[fi * width * e + i] += gv * dseq[pos * e + i];
                            }
                        }
                    }
                    acc_into(&mut grads, *seq, self, |_| {
                        Tensor::new(ss.clone(), gs.clone()).expect("shape")
                    });
                    acc_into(&mut grads, *kernels, self, |_| {
                        Tensor::new(sk.clone(), gk.clone()).expect("shape")
                    });
                }
                Op::RowMax(a) => {
                    let s = self.value(*a).shape().to_vec();
                    let (f, p) = (s[0], s[1]);
                    let d = self.value(*a).data();
                    let g = go.data();
                    let mut ga = vec![0.0; f * p];
                    for r in 0..f {
                        let row = &d[r * p..(r + 1) * p];
                        let mut best = 0;
                        for (j, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = j;
                            }
                        }
                        ga[r * p + best] += g[r];
                    }
                    acc_into(&mut grads, *a, self, |_| {
                        Tensor::new(s.clone(), ga.clone()).expect("shape")
                    });
                }
                Op::Relu(a) => {
                    let va = self.value(*a).clone();
                    acc_into(&mut grads, *a, self, |_| {
                        let data = go
                            .data()
                            .iter()
                            .zip(va.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect();
                        Tensor::new(va.shape().to_vec(), data).expect("shape")
                    });
                }
                Op::Sigmoid(a) => {
                    let out = node.value.clone();
                    acc_into(&mut grads, *a, self, |_| {
                        let data = go
                            .data()
                            .iter()
                            .zip(out.data())
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect();
                        Tensor::new(out.shape().to_vec(), data).expect("shape")
                    });
                }
                Op::Tanh(a) => {
                    let out = node.value.clone();
                    acc_into(&mut grads, *a, self, |_| {
                        let data = go
                            .data()
                            .iter()
                            .zip(out.data())
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect();
                        Tensor::new(out.shape().to_vec(), data).expect("shape")
                    });
                }
                Op::Exp(a) => {
                    let out = node.value.clone();
                    acc_into(&mut grads, *a, self, |_| zip_mul(&go, &out));
                }
                Op::Ln(a) => {
                    let va = self.value(*a).clone();
                    acc_into(&mut grads, *a, self, |_| {
                        let data = go
                            .data()
                            .iter()
                            .zip(va.data())
                            .map(|(g, x)| g / x)
                            .collect();
                        Tensor::new(va.shape().to_vec(), data).expect("shape")
                    });
                }
                Op::LogSoftmax(a) => {
                    // dx_j = g_j - softmax_j * sum(g)
                    let out = node.value.clone();
                    acc_into(&mut grads, *a, self, |_| {
                        let gsum: f64 = go.data().iter().sum();
                        let data = go
                            .data()
                            .iter()
                            .zip(out.data())
                            .map(|(g, y)| g - y.exp() * gsum)
                            .collect();
                        Tensor::new(out.shape().to_vec(), data).expect("shape")
                    });
                }
                Op::Sum(a) => {
                    let gv = go.item();
                    let sa = self.value(*a).shape().to_vec();
                    acc_into(&mut grads, *a, self, |_| Tensor::filled(&sa, gv));
                }
                Op::MeanVectors(xs) => {
                    let k = xs.len() as f64;
                    let share = go.map(|v| v / k);
                    for &x in xs {
                        acc_into(&mut grads, x, self, |_| share.clone());
                    }
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        let piece = Tensor::vector(go.data()[off..off + n].to_vec());
                        acc_into(&mut grads, x, self, |_| piece.clone());
                        off += n;
                    }
                }
                Op::StackScalars(xs) => {
                    for (j, &x) in xs.iter().enumerate() {
                        let gv = go.data()[j];
                        acc_into(&mut grads, x, self, |t| {
                            Tensor::new(t.value(x).shape().to_vec(), vec![gv]).expect("scalar")
                        });
                    }
                }
                Op::Element(a, idx) => {
                    let gv = go.item();
                    let sa = self.value(*a).shape().to_vec();
                    let n = self.value(*a).len();
                    let idx = *idx;
                    acc_into(&mut grads, *a, self, |_| {
                        let mut d = vec![0.0; n];
                        d[idx] = gv;
                        Tensor::new(sa.clone(), d).expect("shape")
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let va = self.value(*a).clone();
                    acc_into(&mut grads, *a, self, |_| {
                        let data = go
                            .data()
                            .iter()
                            .zip(va.data())
                            .map(|(g, x)| if *x >= lo && *x <= hi { *g } else { 0.0 })
                            .collect();
                        Tensor::new(va.shape().to_vec(), data).expect("shape")
                    });
                }
                Op::Reshape(a) => {
                    let sa = self.value(*a).shape().to_vec();
                    acc_into(&mut grads, *a, self, |_| {
                        Tensor::new(sa.clone(), go.data().to_vec()).expect("shape")
                    });
                }
                Op::AddChannelBias(a, bias) => {
                    let f = self.value(*bias).len();
                    let per = self.value(*a).len() / f;
                    let mut gb = vec![0.0; f];
                    for fi in 0..f {
                        gb[fi] = go.data()[fi * per..(fi + 1) * per].iter().sum();
                    }
                    acc_into(&mut grads, *a, self, |_| go.clone());
                    acc_into(&mut grads, *bias, self, |_| {
                        Tensor::new(vec![f], gb.clone()).expect("shape")
                    });
                }
                Op::Embedding { table, ids } => {
                    let st = self.value(*table).shape().to_vec();
                    let e = st[1];
                    let mut gt = vec![0.0; st[0] * e];
                    for (row, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for j in 0..e {
                            gt[id * e + j] += go.data()[row * e + j];
                        }
                    }
                    acc_into(&mut grads, *table, self, |_| {
                        Tensor::new(st.clone(), gt.clone()).expect("shape")
                    });
                }
            }
        }

        Ok(Gradients { per_param })
    }
}

/// One step of a gated recurrent unit, assembled from primitive tape ops so
/// the gradient comes from composition.
///
/// Convention: update gate `u = sigmoid(W_u [x; h] + b_u)` blends toward the
/// candidate, reset gate `r = sigmoid(W_r [x; h] + b_r)` gates the previous
/// state inside the candidate `h~ = tanh(W_h [x; r .* h] + b_h)`, and the new
/// state is `(1 - u) .* h + u .* h~`. Weights are `[D, E+D]`, biases `[D]`.
#[allow(clippy::too_many_arguments)]
pub fn gru_cell(
    tape: &mut Tape,
    h_prev: NodeId,
    x: NodeId,
    w_update: NodeId,
    b_update: NodeId,
    w_reset: NodeId,
    b_reset: NodeId,
    w_cand: NodeId,
    b_cand: NodeId,
) -> Result<NodeId> {
    let d = tape.value(h_prev).len();
    let e = tape.value(x).len();
    for (w, b) in [(w_update, b_update), (w_reset, b_reset), (w_cand, b_cand)] {
        let ws = tape.value(w).shape();
        if ws.len() != 2 || ws[0] != d || ws[1] != e + d {
            return Err(Error::DimensionMismatch {
                what: "gru_cell gate weight",
                expected: d * (e + d),
                got: tape.value(w).len(),
            });
        }
        if tape.value(b).len() != d {
            return Err(Error::DimensionMismatch {
                what: "gru_cell gate bias",
                expected: d,
                got: tape.value(b).len(),
            });
        }
    }
    let xh = tape.concat(&[x, h_prev])?;
    let ua = tape.matvec(w_update, xh)?;
    let ua = tape.add(ua, b_update)?;
    let u = tape.sigmoid(ua);
    let ra = tape.matvec(w_reset, xh)?;
    let ra = tape.add(ra, b_reset)?;
    let r = tape.sigmoid(ra);
    let rh = tape.mul(r, h_prev)?;
    let xrh = tape.concat(&[x, rh])?;
    let ca = tape.matvec(w_cand, xrh)?;
    let ca = tape.add(ca, b_cand)?;
    let cand = tape.tanh(ca);
    let keep = tape.one_minus(u);
    let keep_h = tape.mul(keep, h_prev)?;
    let take_c = tape.mul(u, cand)?;
    tape.add(keep_h, take_c)
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

fn acc_opt(slot: &mut Option<Tensor>, contrib: &Tensor) {
    match slot {
        Some(t) => {
            for (o, v) in t.data_mut().iter_mut().zip(contrib.data()) {
                *o += v;
            }
        }
        None => *slot = Some(contrib.clone()),
    }
}

fn acc_into(
    grads: &mut [Option<Tensor>],
    target: NodeId,
    tape: &Tape,
    contrib: impl FnOnce(&Tape) -> Tensor,
) {
    let c = contrib(tape);
    acc_opt(&mut grads[target.0], &c);
}
